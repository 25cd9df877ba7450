//! EVM bytecode patching: disassembly, partial control-flow recovery,
//! trampoline rewriting, patch templates, differential replay on a small
//! interpreter, and proxy deployment planning.

pub mod asm;
pub mod builder;
pub mod cfg;
pub mod gas;
pub mod hash;
pub mod json;
pub mod minievm;
pub mod opcode;
pub mod rewriter;
pub mod templates;
pub mod difftester;
pub mod deploy;
pub mod samples;
