//! Decoding, encoding and describing raw EVM bytecode.

use crate::gas::GasSchedule;
use crate::opcode::Opcode;
use primitive_types::U256;
use std::fmt::{self, Write as _};

/// Deployed-code size cap (EIP-170).
pub const MAX_CODE_SIZE: usize = 24576;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("instruction at {offset:#x}: {opcode} expects {expected} operand bytes, found {found}")]
    OperandWidthMismatch {
        offset: usize,
        opcode: Opcode,
        expected: usize,
        found: usize,
    },
    #[error("invalid hex: {0}")]
    InvalidHex(String),
}

/// One decoded instruction.
///
/// `operand` always has the full width of the push; a push cut off by the
/// end of the code is zero-padded and `missing` counts the padded bytes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Instruction {
    pub offset: usize,
    pub opcode: Opcode,
    pub operand: Vec<u8>,
    pub missing: usize,
}

impl Instruction {
    pub fn new(offset: usize, opcode: Opcode, operand: Vec<u8>) -> Self {
        Instruction {
            offset,
            opcode,
            operand,
            missing: 0,
        }
    }

    pub fn mnemonic(&self) -> String {
        self.opcode.mnemonic()
    }

    pub fn is_truncated(&self) -> bool {
        self.missing > 0
    }

    /// Byte length of the instruction in the code it was decoded from.
    pub fn encoded_len(&self) -> usize {
        1 + self.operand.len() - self.missing
    }

    /// Address of the next instruction.
    pub fn next_offset(&self) -> usize {
        self.offset + 1 + self.operand.len()
    }

    pub fn static_gas(&self, schedule: &GasSchedule) -> Option<u64> {
        schedule.static_gas(self.opcode).ok()
    }

    /// Push operand as a word.
    pub fn push_value(&self) -> Option<U256> {
        self.opcode
            .is_push()
            .then(|| U256::from_big_endian(&self.operand))
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.opcode.0);
        out.extend_from_slice(&self.operand[..self.operand.len() - self.missing]);
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#04x}: {}", self.offset, self.opcode)?;
        if self.opcode.is_push() {
            write!(f, " {:#x}", U256::from_big_endian(&self.operand))?;
            if self.is_truncated() {
                write!(f, " // truncated by {}", self.missing)?;
            }
        }
        Ok(())
    }
}

/// A decoded code blob.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub code_length: usize,
    /// Bytes after the last instruction, kept verbatim.
    pub trailing_data: Vec<u8>,
}

impl Program {
    /// Index of the instruction starting exactly at `offset`.
    pub fn index_of(&self, offset: usize) -> Option<usize> {
        self.instructions
            .binary_search_by_key(&offset, |i| i.offset)
            .ok()
    }

    pub fn at(&self, offset: usize) -> Option<&Instruction> {
        self.index_of(offset).map(|i| &self.instructions[i])
    }

    /// Listing in `OFFSET: MNEMONIC [0xOPERAND]` form, one instruction per line.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for ins in &self.instructions {
            let _ = writeln!(out, "{ins}");
        }
        if !self.trailing_data.is_empty() {
            let start = self.code_length - self.trailing_data.len();
            let _ = writeln!(out, "{start:#04x}: DATA 0x{}", hex::encode(&self.trailing_data));
        }
        out
    }
}

/// Linear-sweep decode. Every byte decodes; unassigned opcodes become
/// single-byte instructions carrying the raw byte.
pub fn disassemble(code: &[u8]) -> Program {
    let mut instructions = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let opcode = Opcode(code[pc]);
        let width = opcode.immediate_len();
        let available = width.min(code.len() - pc - 1);
        let mut operand = code[pc + 1..pc + 1 + available].to_vec();
        operand.resize(width, 0);
        instructions.push(Instruction {
            offset: pc,
            opcode,
            operand,
            missing: width - available,
        });
        pc += 1 + width;
    }
    Program {
        instructions,
        code_length: code.len(),
        trailing_data: Vec::new(),
    }
}

/// Decode `code[..boundary]` as instructions and keep the rest as data.
pub fn disassemble_with_boundary(code: &[u8], boundary: usize) -> Program {
    let boundary = boundary.min(code.len());
    let mut program = disassemble(&code[..boundary]);
    program.code_length = code.len();
    program.trailing_data = code[boundary..].to_vec();
    program
}

pub fn assemble(program: &Program) -> Result<Vec<u8>, AsmError> {
    let mut out = Vec::with_capacity(program.code_length);
    for ins in &program.instructions {
        let expected = ins.opcode.immediate_len();
        if ins.operand.len() != expected || ins.missing > expected {
            return Err(AsmError::OperandWidthMismatch {
                offset: ins.offset,
                opcode: ins.opcode,
                expected,
                found: ins.operand.len(),
            });
        }
        ins.encode_into(&mut out);
    }
    out.extend_from_slice(&program.trailing_data);
    Ok(out)
}

/// Addresses that are legal jump targets.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct JumpdestSet {
    valid: Vec<bool>,
}

impl JumpdestSet {
    pub fn contains(&self, addr: usize) -> bool {
        self.valid.get(addr).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        !self.valid.iter().any(|v| *v)
    }
}

/// Linear sweep from offset 0 marking JUMPDEST bytes outside push data.
/// Control flow is ignored.
pub fn jumpdest_analysis(code: &[u8]) -> JumpdestSet {
    let mut valid = vec![false; code.len()];
    let mut pc = 0;
    while pc < code.len() {
        let op = Opcode(code[pc]);
        if op == Opcode::JUMPDEST {
            valid[pc] = true;
        }
        pc += 1 + op.immediate_len();
    }
    JumpdestSet { valid }
}

/// Parse hex with an optional `0x` prefix; surrounding whitespace ignored.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, AsmError> {
    let cleaned: String = text.split_whitespace().collect();
    let digits = cleaned
        .strip_prefix("0x")
        .or_else(|| cleaned.strip_prefix("0X"))
        .unwrap_or(&cleaned);
    hex::decode(digits).map_err(|e| AsmError::InvalidHex(e.to_string()))
}

/// Lowercase hex with `0x` prefix.
pub fn to_hex(bytes: &[u8]) -> String {
    format!("0x{}", hex::encode(bytes))
}

/// Code from a file that holds either hex text or raw binary.
pub fn decode_code_file(contents: &[u8]) -> Result<Vec<u8>, AsmError> {
    match std::str::from_utf8(contents) {
        Ok(text) if looks_like_hex(text) => parse_hex(text),
        _ => Ok(contents.to_vec()),
    }
}

fn looks_like_hex(text: &str) -> bool {
    let t = text.trim();
    let t = t.strip_prefix("0x").unwrap_or(t);
    t.chars().all(|c| c.is_ascii_hexdigit() || c.is_whitespace())
}

/// Big-endian bytes of `value` with leading zeros stripped, at least one byte.
pub fn minimal_be_bytes(value: U256) -> Vec<u8> {
    let mut buf = [0u8; 32];
    value.to_big_endian(&mut buf);
    let first = buf.iter().position(|b| *b != 0).unwrap_or(31);
    buf[first..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_add_example() {
        let code = parse_hex("0x60016001015b00").unwrap();
        let p = disassemble(&code);
        let names: Vec<_> = p.instructions.iter().map(|i| i.mnemonic()).collect();
        assert_eq!(names, ["PUSH1", "PUSH1", "ADD", "JUMPDEST", "STOP"]);
        assert_eq!(p.instructions[0].operand, vec![1]);
        assert_eq!(p.instructions[3].offset, 5);
        assert_eq!(assemble(&p).unwrap(), code);
    }

    #[test]
    fn empty_input() {
        let p = disassemble(&[]);
        assert!(p.instructions.is_empty());
        assert_eq!(assemble(&p).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn truncated_push() {
        let p = disassemble(&[0x60]);
        assert_eq!(p.instructions.len(), 1);
        let ins = &p.instructions[0];
        assert_eq!(ins.opcode, Opcode::PUSH1);
        assert_eq!(ins.operand, vec![0]);
        assert!(ins.is_truncated());
        assert_eq!(assemble(&p).unwrap(), vec![0x60]);

        let p = disassemble(&[0x7f, 1, 2, 3]);
        assert_eq!(p.instructions[0].missing, 29);
        assert_eq!(assemble(&p).unwrap(), vec![0x7f, 1, 2, 3]);
    }

    #[test]
    fn unknown_bytes_are_kept() {
        let p = disassemble(&[0x0c, 0xef, 0x00]);
        assert_eq!(p.instructions.len(), 3);
        assert_eq!(p.instructions[0].mnemonic(), "INVALID_0x0c");
        assert_eq!(assemble(&p).unwrap(), vec![0x0c, 0xef, 0x00]);
    }

    #[test]
    fn assemble_examples() {
        let p = Program {
            instructions: vec![
                Instruction::new(0, Opcode::PUSH1, vec![7]),
                Instruction::new(2, Opcode::JUMP, vec![]),
            ],
            code_length: 3,
            trailing_data: vec![],
        };
        assert_eq!(assemble(&p).unwrap(), vec![0x60, 0x07, 0x56]);
        let p = disassemble(&[0x5b, 0x00]);
        assert_eq!(assemble(&p).unwrap(), vec![0x5b, 0x00]);
    }

    #[test]
    fn width_mismatch() {
        let p = Program {
            instructions: vec![Instruction::new(0, Opcode::PUSH2, vec![7])],
            code_length: 3,
            trailing_data: vec![],
        };
        assert!(matches!(
            assemble(&p),
            Err(AsmError::OperandWidthMismatch { expected: 2, found: 1, .. })
        ));
    }

    #[test]
    fn jumpdest_examples() {
        assert_eq!(jumpdest_analysis(&[0x5b, 0x00]).iter().collect::<Vec<_>>(), [0]);
        assert!(jumpdest_analysis(&[0x60, 0x5b]).is_empty());
        assert_eq!(
            jumpdest_analysis(&[0x00, 0x60, 0x5b, 0x5b]).iter().collect::<Vec<_>>(),
            [3]
        );
    }

    #[test]
    fn listing_format() {
        let p = disassemble(&parse_hex("60016001015b00").unwrap());
        let text = p.listing();
        assert_eq!(
            text,
            "0x00: PUSH1 0x1\n0x02: PUSH1 0x1\n0x04: ADD\n0x05: JUMPDEST\n0x06: STOP\n"
        );
    }

    #[test]
    fn boundary_split_roundtrips() {
        let code = parse_hex("600056fe5b5b61").unwrap();
        let p = disassemble_with_boundary(&code, 4);
        assert_eq!(p.instructions.len(), 3);
        assert_eq!(p.trailing_data, vec![0x5b, 0x5b, 0x61]);
        assert_eq!(assemble(&p).unwrap(), code);
    }

    #[test]
    fn hex_parsing() {
        assert_eq!(parse_hex(" 0x0a0b\n").unwrap(), vec![10, 11]);
        assert_eq!(parse_hex("0a0b").unwrap(), vec![10, 11]);
        assert!(parse_hex("0xzz").is_err());
        assert_eq!(decode_code_file(b"0x6001\n").unwrap(), vec![0x60, 0x01]);
        assert_eq!(decode_code_file(&[0x60, 0x01]).unwrap(), vec![0x60, 0x01]);
    }

    #[test]
    fn minimal_bytes() {
        assert_eq!(minimal_be_bytes(U256::zero()), vec![0]);
        assert_eq!(minimal_be_bytes(U256::from(0x1234)), vec![0x12, 0x34]);
    }
}
