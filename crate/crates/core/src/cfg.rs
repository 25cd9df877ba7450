//! Basic-block boundaries and fall-through edges.
//!
//! This is deliberately not a full control-flow graph: no jump targets are
//! resolved and no data flow is tracked. The trampoline rewriter only needs
//! to know where a block starts and ends and which blocks can be entered
//! solely by falling through.

use crate::asm::{JumpdestSet, Program};
use crate::opcode::Opcode;
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Terminator {
    Jump,
    Jumpi,
    Stop,
    Return,
    Revert,
    Invalid,
    SelfDestruct,
    Fallthrough,
}

impl Terminator {
    fn of(op: Opcode) -> Option<Terminator> {
        Some(match op {
            Opcode::JUMP => Terminator::Jump,
            Opcode::JUMPI => Terminator::Jumpi,
            Opcode::STOP => Terminator::Stop,
            Opcode::RETURN => Terminator::Return,
            Opcode::REVERT => Terminator::Revert,
            Opcode::SELFDESTRUCT => Terminator::SelfDestruct,
            op if op == Opcode::INVALID || !op.is_known() => Terminator::Invalid,
            _ => return None,
        })
    }

    /// Whether execution can continue at the next address.
    pub fn falls_through(self) -> bool {
        matches!(self, Terminator::Jumpi | Terminator::Fallthrough)
    }
}

impl fmt::Display for Terminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Terminator::Jump => "JUMP",
            Terminator::Jumpi => "JUMPI",
            Terminator::Stop => "STOP",
            Terminator::Return => "RETURN",
            Terminator::Revert => "REVERT",
            Terminator::Invalid => "INVALID",
            Terminator::SelfDestruct => "SELFDESTRUCT",
            Terminator::Fallthrough => "FALLTHROUGH",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasicBlock {
    pub start: usize,
    /// One past the last byte of the last instruction.
    pub end: usize,
    pub terminator: Terminator,
    pub starts_with_jumpdest: bool,
}

impl BasicBlock {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, pc: usize) -> bool {
        (self.start..self.end).contains(&pc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CfgError {
    #[error("address {0:#x} is not on an instruction boundary")]
    NotOnInstructionBoundary(usize),
    #[error("address {0:#x} lies in the trailing data region")]
    AddressInDataRegion(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialCfg {
    pub blocks: Vec<BasicBlock>,
    /// Index pairs `(from, to)` into `blocks`.
    pub fallthrough_edges: Vec<(usize, usize)>,
    /// First byte of trailing data; equals the code length when there is none.
    pub code_end: usize,
    pub code_length: usize,
    instruction_offsets: Vec<usize>,
}

/// Where reachable code stops.
///
/// Bytes after the first halting instruction that follows the last valid
/// JUMPDEST can only be reached by a jump, and no jump can land there, so
/// they are treated as data.
fn data_boundary(program: &Program, jumpdests: &JumpdestSet) -> usize {
    let code_len = program.code_length - program.trailing_data.len();
    let last_dest = jumpdests.iter().last();
    let from = match last_dest {
        Some(addr) => program.index_of(addr).unwrap_or(0),
        None => 0,
    };
    program.instructions[from..]
        .iter()
        .find(|ins| ins.opcode.is_halting_or_jump())
        .map(|ins| ins.next_offset().min(code_len))
        .unwrap_or(code_len)
}

pub fn recover_blocks(program: &Program, jumpdests: &JumpdestSet) -> PartialCfg {
    let code_end = if program.instructions.is_empty() {
        0
    } else {
        data_boundary(program, jumpdests)
    };
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut instruction_offsets = Vec::new();
    let mut current: Option<BasicBlock> = None;

    for ins in program.instructions.iter().take_while(|i| i.offset < code_end) {
        instruction_offsets.push(ins.offset);
        let is_dest = jumpdests.contains(ins.offset);
        if is_dest {
            if let Some(block) = current.take() {
                blocks.push(block);
            }
        }
        let block = current.get_or_insert(BasicBlock {
            start: ins.offset,
            end: ins.offset,
            terminator: Terminator::Fallthrough,
            starts_with_jumpdest: is_dest,
        });
        block.end = ins.next_offset().min(code_end);
        if let Some(term) = Terminator::of(ins.opcode) {
            block.terminator = term;
            blocks.push(current.take().expect("block is open"));
        }
    }
    if let Some(block) = current.take() {
        blocks.push(block);
    }

    let fallthrough_edges = blocks
        .windows(2)
        .enumerate()
        .filter(|(_, pair)| pair[0].terminator.falls_through() && pair[0].end == pair[1].start)
        .map(|(i, _)| (i, i + 1))
        .collect();

    PartialCfg {
        blocks,
        fallthrough_edges,
        code_end,
        code_length: program.code_length,
        instruction_offsets,
    }
}

impl PartialCfg {
    pub fn is_instruction_boundary(&self, pc: usize) -> bool {
        self.instruction_offsets.binary_search(&pc).is_ok()
    }

    fn index_containing(&self, pc: usize) -> Option<usize> {
        let idx = self.blocks
            .partition_point(|b| b.start <= pc)
            .checked_sub(1)?;
        self.blocks[idx].contains(pc).then_some(idx)
    }

    pub fn block_containing(&self, pc: usize) -> Result<&BasicBlock, CfgError> {
        if pc >= self.code_end {
            return Err(CfgError::AddressInDataRegion(pc));
        }
        if !self.is_instruction_boundary(pc) {
            return Err(CfgError::NotOnInstructionBoundary(pc));
        }
        let idx = self
            .index_containing(pc)
            .ok_or(CfgError::NotOnInstructionBoundary(pc))?;
        Ok(&self.blocks[idx])
    }

    /// Block reached by falling off the end of `block`, if any.
    pub fn successor(&self, block: &BasicBlock) -> Option<&BasicBlock> {
        let idx = self.blocks.iter().position(|b| b == block)?;
        self.fallthrough_edges
            .iter()
            .find(|(from, _)| *from == idx)
            .map(|(_, to)| &self.blocks[*to])
    }

    /// Successors that can only be entered by falling through from `block`.
    ///
    /// Stops before the first successor that starts with JUMPDEST (that
    /// one can be rejoined with an explicit jump) or after a block that
    /// does not fall through.
    pub fn fallthrough_chain(&self, block: &BasicBlock) -> Vec<BasicBlock> {
        let mut chain = Vec::new();
        let mut cursor = *block;
        while let Some(next) = self.successor(&cursor) {
            if next.starts_with_jumpdest {
                break;
            }
            chain.push(*next);
            cursor = *next;
        }
        chain
    }

    /// One block per line: `start..end  terminator  [JUMPDEST]`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let _ = write!(out, "{:#06x}..{:#06x}  {}", b.start, b.end, b.terminator);
            if b.starts_with_jumpdest {
                out.push_str("  JUMPDEST");
            }
            out.push('\n');
        }
        if self.code_end < self.code_length {
            let _ = writeln!(out, "{:#06x}..{:#06x}  DATA", self.code_end, self.code_length);
        }
        out
    }

    /// Graphviz rendering with fall-through edges only.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph cfg {\n  node [shape=box, fontname=monospace];\n");
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "  b{:x} [label=\"{:#x}..{:#x}\\n{}\"];",
                b.start, b.start, b.end, b.terminator
            );
        }
        for (from, to) in &self.fallthrough_edges {
            let _ = writeln!(
                out,
                "  b{:x} -> b{:x} [style=dashed, label=\"fallthrough\"];",
                self.blocks[*from].start, self.blocks[*to].start
            );
        }
        out.push_str("}\n");
        out
    }
}
