//! Trampoline rewriting.
//!
//! A patched block is overwritten in place by a jump to a copy appended
//! after the original code. Nothing else moves, so every absolute jump
//! target and every CODECOPY offset in the original stays valid.

use crate::asm::{disassemble, jumpdest_analysis, minimal_be_bytes, Instruction, MAX_CODE_SIZE};
use crate::builder::{assemble_items, AsmItem, BuildError};
use crate::cfg::{recover_blocks, BasicBlock, CfgError, PartialCfg};
use crate::opcode::Opcode;
use crate::templates::{PatchMode, TemplateInstance};
use primitive_types::U256;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Gas of `PUSHk; JUMP` plus the JUMPDEST that opens the copy.
pub const TRAMPOLINE_GAS: u64 = 3 + 8 + 1;
/// Gas of the `PUSHk; JUMP` back into original code.
pub const REJOIN_GAS: u64 = 3 + 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewriteError {
    #[error("block {start:#x}..{end:#x} holds {size} bytes, the trampoline needs {needed}")]
    InsufficientBlockSize {
        start: usize,
        end: usize,
        size: usize,
        needed: usize,
    },
    #[error("patched code is {size} bytes, over the {cap} byte cap")]
    CodeSizeCapExceeded { size: usize, cap: usize },
    #[error("two patches target pc {0:#x}")]
    OverlappingPatches(usize),
    #[error("patch point {pc:#x}: {source}")]
    BadPatchPoint { pc: usize, source: CfgError },
    #[error("patch point {pc:#x} names block {claimed:#x}, but it lies in block {actual:#x}")]
    StalePatchPoint {
        pc: usize,
        claimed: usize,
        actual: usize,
    },
    #[error("block {0:#x} falls through past the end of code")]
    UnterminatedFallthrough(usize),
    #[error("template `{template}` contains state-changing {opcode}")]
    StateChangingTemplate { template: String, opcode: Opcode },
    #[error("layout failed: {0}")]
    Layout(#[from] BuildError),
}

/// Where a patch applies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPoint {
    pub pc: usize,
    pub kind: String,
    pub block: BasicBlock,
}

impl PatchPoint {
    /// Resolve the enclosing block of `pc`.
    pub fn locate(cfg: &PartialCfg, pc: usize, kind: impl Into<String>) -> Result<Self, CfgError> {
        Ok(PatchPoint {
            pc,
            kind: kind.into(),
            block: *cfg.block_containing(pc)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trampoline {
    pub block_start: usize,
    pub block_end: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchNote {
    pub pc: usize,
    pub kind: String,
    pub template: String,
    pub block_start: usize,
    /// Starts of successor blocks copied along with the patched block.
    pub duplicated_blocks: Vec<usize>,
    /// Original address the copy jumps back to, if any.
    pub rejoin: Option<usize>,
    pub template_gas: u64,
    /// Extra gas per traversal of the patched block on the success path.
    pub traversal_gas_delta: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteResult {
    #[serde(with = "crate::json::bytes")]
    pub patched_code: Vec<u8>,
    pub original_length: usize,
    pub padding: usize,
    pub appended_region_start: usize,
    pub trampolines: Vec<Trampoline>,
    /// Half-open byte ranges holding template code (not copied original
    /// instructions). A failure inside one is a failure caused by a patch.
    pub template_ranges: Vec<(usize, usize)>,
    pub size_increase: usize,
    pub report: Vec<PatchNote>,
}

impl RewriteResult {
    fn identity(code: &[u8]) -> Self {
        RewriteResult {
            patched_code: code.to_vec(),
            original_length: code.len(),
            padding: 0,
            appended_region_start: code.len(),
            trampolines: Vec::new(),
            template_ranges: Vec::new(),
            size_increase: 0,
            report: Vec::new(),
        }
    }

    /// Machine-readable summary without the code blob.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "original_length": self.original_length,
            "patched_length": self.patched_code.len(),
            "size_increase": self.size_increase,
            "padding": self.padding,
            "appended_region_start": self.appended_region_start,
            "trampolines": self.trampolines,
            "template_ranges": self.template_ranges,
            "patches": self.report,
        })
    }
}

/// Filler needed after the original code so that a push cut off at the
/// end cannot swallow appended bytes.
///
/// `code_end` must be an instruction boundary; the sweep starts there,
/// or at 0 when there is no data tail.
pub fn compute_padding(code_end: usize, code: &[u8]) -> usize {
    let from = if code_end < code.len() { code_end } else { 0 };
    disassemble(&code[from..])
        .instructions
        .last()
        .map_or(0, |ins| ins.missing)
}

/// `PUSHk target; JUMP` padded with INVALID to `block_size` bytes.
pub fn trampoline_for(target: usize, block_size: usize) -> Result<Vec<Instruction>, RewriteError> {
    trampoline_with_entry(target, block_size, false)
}

/// As [`trampoline_for`], optionally keeping a leading JUMPDEST so that
/// jumps into the block stay legal.
pub fn trampoline_with_entry(
    target: usize,
    block_size: usize,
    keep_jumpdest: bool,
) -> Result<Vec<Instruction>, RewriteError> {
    let operand = minimal_be_bytes(U256::from(target));
    let needed = operand.len() + 2 + usize::from(keep_jumpdest);
    if block_size < needed {
        return Err(RewriteError::InsufficientBlockSize {
            start: 0,
            end: block_size,
            size: block_size,
            needed,
        });
    }
    let mut out = Vec::new();
    let mut pc = 0;
    if keep_jumpdest {
        out.push(Instruction::new(0, Opcode::JUMPDEST, vec![]));
        pc = 1;
    }
    let width = operand.len();
    out.push(Instruction::new(pc, Opcode::push(width), operand));
    pc += 1 + width;
    out.push(Instruction::new(pc, Opcode::JUMP, vec![]));
    pc += 1;
    while pc < block_size {
        out.push(Instruction::new(pc, Opcode::INVALID, vec![]));
        pc += 1;
    }
    Ok(out)
}

fn encode(instructions: &[Instruction]) -> Vec<u8> {
    let mut out = Vec::new();
    for ins in instructions {
        ins.encode_into(&mut out);
    }
    out
}

/// Copy of an original instruction. Truncated pushes are completed with
/// the zero bytes the EVM would have read.
fn copy_item(ins: &Instruction) -> AsmItem {
    if ins.opcode.is_push() {
        AsmItem::Push(ins.operand.clone())
    } else {
        AsmItem::Op(ins.opcode)
    }
}

fn check_template(instance: &TemplateInstance) -> Result<(), RewriteError> {
    for item in instance.inline.iter().chain(&instance.out_of_line) {
        if let Some(op) = item.opcode() {
            if op.is_state_changing() {
                return Err(RewriteError::StateChangingTemplate {
                    template: instance.template.clone(),
                    opcode: op,
                });
            }
        }
    }
    Ok(())
}

/// Prefix every label of a patch so that instances cannot collide.
///
/// Labels defined inside `items` get `local`; references to anything else
/// (the out-of-line part) get `shared`. Inline code is emitted once per
/// copy of its block, so its own labels need a per-copy prefix.
fn namespaced(items: &[AsmItem], shared: &str, local: &str) -> Vec<AsmItem> {
    let defined: Vec<&str> = items
        .iter()
        .filter_map(|item| match item {
            AsmItem::Label(n) | AsmItem::Mark(n) => Some(n.as_str()),
            _ => None,
        })
        .collect();
    let rename = |name: &str| {
        let prefix = if defined.contains(&name) { local } else { shared };
        format!("{prefix}{name}")
    };
    items
        .iter()
        .map(|item| match item {
            AsmItem::Label(n) => AsmItem::Label(rename(n)),
            AsmItem::Mark(n) => AsmItem::Mark(rename(n)),
            AsmItem::PushLabel(n) => AsmItem::PushLabel(rename(n)),
            AsmItem::PushLabelWide(n, w) => AsmItem::PushLabelWide(rename(n), *w),
            other => other.clone(),
        })
        .collect()
}

fn block_label(start: usize) -> String {
    format!("@block:{start:x}")
}

struct Prepared<'a> {
    point: &'a PatchPoint,
    instance: &'a TemplateInstance,
    prefix: String,
}

impl Prepared<'_> {
    fn inline(&self, copy: usize) -> Vec<AsmItem> {
        let local = format!("{}c{copy}:", self.prefix);
        namespaced(&self.instance.inline, &self.prefix, &local)
    }

    fn out_of_line(&self) -> Vec<AsmItem> {
        namespaced(&self.instance.out_of_line, &self.prefix, &self.prefix)
    }
}

/// Apply `patches` to `code`.
pub fn rewrite(
    code: &[u8],
    patches: &[(PatchPoint, TemplateInstance)],
) -> Result<RewriteResult, RewriteError> {
    if patches.is_empty() {
        return Ok(RewriteResult::identity(code));
    }
    let program = disassemble(code);
    let jumpdests = jumpdest_analysis(code);
    let cfg = recover_blocks(&program, &jumpdests);

    let mut sorted: Vec<&(PatchPoint, TemplateInstance)> = patches.iter().collect();
    sorted.sort_by_key(|(p, _)| p.pc);
    let mut by_pc: BTreeMap<usize, Prepared> = BTreeMap::new();
    for (i, (point, instance)) in sorted.iter().enumerate() {
        let block = cfg
            .block_containing(point.pc)
            .map_err(|source| RewriteError::BadPatchPoint {
                pc: point.pc,
                source,
            })?;
        if block.start != point.block.start || block.end != point.block.end {
            return Err(RewriteError::StalePatchPoint {
                pc: point.pc,
                claimed: point.block.start,
                actual: block.start,
            });
        }
        check_template(instance)?;
        let prefix = format!("@p{i}:");
        let prepared = Prepared {
            point,
            instance,
            prefix,
        };
        if by_pc.insert(point.pc, prepared).is_some() {
            return Err(RewriteError::OverlappingPatches(point.pc));
        }
    }

    // One copy per patched block, in address order.
    let mut patched_blocks: Vec<BasicBlock> = Vec::new();
    for p in by_pc.values() {
        if patched_blocks.last().map(|b| b.start) != Some(p.point.block.start) {
            patched_blocks.push(p.point.block);
        }
    }

    let padding = compute_padding(cfg.code_end, code);
    let appended_start = code.len() + padding;
    let mut items = Vec::new();
    let mut tail = Vec::new();
    let mut notes = Vec::new();
    let mut ranges = 0usize;
    let mut range = |items: &mut Vec<AsmItem>, body: Vec<AsmItem>| {
        if body.is_empty() {
            return;
        }
        items.push(AsmItem::Mark(format!("@range:{ranges}:s")));
        items.extend(body);
        items.push(AsmItem::Mark(format!("@range:{ranges}:e")));
        ranges += 1;
    };

    for (copy, block) in patched_blocks.iter().enumerate() {
        items.push(AsmItem::Label(block_label(block.start)));
        let chain = cfg.fallthrough_chain(block);
        let last = chain.last().unwrap_or(block);
        for (n, b) in std::iter::once(block).chain(&chain).enumerate() {
            for ins in instructions_in(&program, b) {
                // The copy's own JUMPDEST stands in for an entry JUMPDEST.
                let is_entry = n == 0 && ins.offset == block.start && block.starts_with_jumpdest;
                match by_pc.get(&ins.offset) {
                    Some(p) => {
                        range(&mut items, p.inline(copy));
                        if n == 0 {
                            range(&mut tail, p.out_of_line());
                        }
                        if p.instance.mode == PatchMode::InsertBefore && !is_entry {
                            items.push(copy_item(ins));
                        }
                    }
                    None if is_entry => {}
                    None => items.push(copy_item(ins)),
                }
            }
        }
        let mut rejoin = None;
        if last.terminator.falls_through() {
            let succ = cfg
                .successor(last)
                .ok_or(RewriteError::UnterminatedFallthrough(last.start))?;
            items.push(AsmItem::push_value(succ.start as u64));
            items.push(AsmItem::Op(Opcode::JUMP));
            rejoin = Some(succ.start);
        }

        let hops = TRAMPOLINE_GAS + if rejoin.is_some() { REJOIN_GAS } else { 0 };
        for p in by_pc.values().filter(|p| p.point.block.start == block.start) {
            notes.push(PatchNote {
                pc: p.point.pc,
                kind: p.point.kind.clone(),
                template: p.instance.template.clone(),
                block_start: block.start,
                duplicated_blocks: chain.iter().map(|b| b.start).collect(),
                rejoin,
                template_gas: p.instance.expected_extra_gas,
                traversal_gas_delta: hops + p.instance.expected_extra_gas,
            });
        }
    }
    items.extend(tail);

    let assembled = assemble_items(&items, appended_start)?;
    let template_ranges = (0..ranges)
        .map(|k| {
            let at = |end: &str| assembled.labels[&format!("@range:{k}:{end}")];
            (at("s"), at("e"))
        })
        .collect::<Vec<_>>();
    let mut patched = code.to_vec();
    let mut trampolines = Vec::new();
    for block in &patched_blocks {
        let target = assembled.labels[&block_label(block.start)];
        let stub = trampoline_with_entry(target, block.len(), block.starts_with_jumpdest)
            .map_err(|e| match e {
                RewriteError::InsufficientBlockSize { size, needed, .. } => {
                    RewriteError::InsufficientBlockSize {
                        start: block.start,
                        end: block.end,
                        size,
                        needed,
                    }
                }
                other => other,
            })?;
        patched[block.start..block.end].copy_from_slice(&encode(&stub));
        trampolines.push(Trampoline {
            block_start: block.start,
            block_end: block.end,
            target,
        });
    }
    patched.extend(std::iter::repeat_n(0u8, padding));
    patched.extend_from_slice(&assembled.code);
    if patched.len() > MAX_CODE_SIZE {
        return Err(RewriteError::CodeSizeCapExceeded {
            size: patched.len(),
            cap: MAX_CODE_SIZE,
        });
    }
    Ok(RewriteResult {
        size_increase: patched.len() - code.len(),
        patched_code: patched,
        original_length: code.len(),
        padding,
        appended_region_start: appended_start,
        trampolines,
        template_ranges,
        report: notes,
    })
}

fn instructions_in<'p>(
    program: &'p crate::asm::Program,
    block: &BasicBlock,
) -> impl Iterator<Item = &'p Instruction> {
    let first = program.index_of(block.start).unwrap_or(program.instructions.len());
    let end = block.end;
    program.instructions[first..]
        .iter()
        .take_while(move |ins| ins.offset < end)
}

#[cfg(test)]
mod tests;
