//! Recognition of the compiler's selector dispatcher, and the access
//! control patches built on it.

use super::dsl::{FunctionRef, RequireClause};
use super::{make_instance, PatchMode, TemplateError, TemplateId, TemplateInstance};
use crate::asm::Program;
use crate::builder::AsmItem;
use crate::cfg::PartialCfg;
use crate::hash::{normalize_signature, Selector};
use crate::opcode::Opcode;
use crate::rewriter::PatchPoint;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchEntry {
    pub selector: Selector,
    /// Function body entry (a JUMPDEST).
    pub entry: usize,
    /// Start of the dispatcher block holding the comparison.
    pub compare_block: usize,
    /// pc of the `PUSH <entry>` feeding the JUMPI.
    pub push_pc: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DispatcherInfo {
    pub entries: BTreeMap<Selector, DispatchEntry>,
    /// The free-memory-pointer prologue was seen.
    pub prologue: bool,
}

impl DispatcherInfo {
    pub fn entry(&self, selector: Selector) -> Option<&DispatchEntry> {
        self.entries.get(&selector)
    }
}

fn has_prologue(program: &Program) -> bool {
    let ins = &program.instructions;
    ins.len() >= 3
        && ins[0].opcode == Opcode::PUSH1
        && matches!(ins[0].operand[0], 0x80 | 0x60)
        && ins[1].opcode == Opcode::PUSH1
        && ins[1].operand[0] == 0x40
        && ins[2].opcode == Opcode::MSTORE
}

/// Map selectors to function entries by matching
/// `[DUP1] PUSH4 sel [DUP2] EQ PUSHk addr JUMPI` in the blocks reachable
/// from the entry by falling through.
pub fn locate_dispatcher(program: &Program, cfg: &PartialCfg) -> Result<DispatcherInfo, TemplateError> {
    let mut info = DispatcherInfo {
        entries: BTreeMap::new(),
        prologue: has_prologue(program),
    };
    let Some(mut block) = cfg.blocks.first().copied() else {
        return Err(TemplateError::DispatcherNotRecognized("empty code".into()));
    };
    loop {
        let first = program.index_of(block.start).expect("blocks start on instructions");
        let ins: Vec<_> = program.instructions[first..]
            .iter()
            .take_while(|i| i.offset < block.end)
            .collect();
        for w in 0..ins.len() {
            if ins[w].opcode != Opcode::PUSH4 {
                continue;
            }
            let mut k = w + 1;
            if ins.get(k).map(|i| i.opcode) == Some(Opcode::DUP2) {
                k += 1;
            }
            let (Some(eq), Some(push), Some(jumpi)) = (ins.get(k), ins.get(k + 1), ins.get(k + 2)) else {
                continue;
            };
            if eq.opcode != Opcode::EQ || !push.opcode.is_push() || jumpi.opcode != Opcode::JUMPI {
                continue;
            }
            let Some(target) = push.push_value().filter(|v| v.bits() <= 32).map(|v| v.as_usize()) else {
                continue;
            };
            let is_entry = cfg
                .block_containing(target)
                .is_ok_and(|b| b.start == target && b.starts_with_jumpdest);
            if !is_entry {
                continue;
            }
            let s = &ins[w].operand;
            let selector = Selector([s[0], s[1], s[2], s[3]]);
            info.entries.entry(selector).or_insert(DispatchEntry {
                selector,
                entry: target,
                compare_block: block.start,
                push_pc: push.offset,
            });
        }
        match cfg.successor(&block) {
            Some(next) if block.terminator.falls_through() => block = *next,
            _ => break,
        }
    }
    if info.entries.is_empty() && !info.prologue {
        return Err(TemplateError::DispatcherNotRecognized(
            "no selector comparisons and no compiler prologue".into(),
        ));
    }
    Ok(info)
}

/// Resolve a function reference to a selector. Bare names are looked up
/// in `signatures`: an exact name match first, then a unique
/// case-insensitive one.
pub fn resolve_function(func: &FunctionRef, signatures: &[String]) -> Result<Selector, TemplateError> {
    match func {
        FunctionRef::Selector(s) => Ok(*s),
        FunctionRef::Signature(sig) => Ok(Selector::from_signature(sig)),
        FunctionRef::Name(name) => {
            let name_of = |sig: &String| sig.split('(').next().unwrap_or("").trim().to_string();
            let exact: Vec<&String> = signatures.iter().filter(|s| name_of(s) == *name).collect();
            let pool = if exact.is_empty() {
                signatures
                    .iter()
                    .filter(|s| name_of(s).eq_ignore_ascii_case(name))
                    .collect()
            } else {
                exact
            };
            match pool.as_slice() {
                [one] => Ok(Selector::from_signature(one)),
                [] => Err(TemplateError::FunctionNotFound(name.clone())),
                many => Err(TemplateError::AmbiguousFunction {
                    name: name.clone(),
                    candidates: many.iter().map(|s| normalize_signature(s)).collect(),
                }),
            }
        }
    }
}

fn lookup<'a>(
    func: &FunctionRef,
    info: &'a DispatcherInfo,
    signatures: &[String],
) -> Result<&'a DispatchEntry, TemplateError> {
    let selector = resolve_function(func, signatures)?;
    info.entry(selector)
        .ok_or_else(|| TemplateError::FunctionNotFound(format!("{func} ({selector})")))
}

/// Guard at the function entry that reverts unless the clause holds.
pub fn specialize_add_require(
    clause: &RequireClause,
    info: &DispatcherInfo,
    cfg: &PartialCfg,
    signatures: &[String],
) -> Result<(PatchPoint, TemplateInstance), TemplateError> {
    let entry = lookup(&clause.function, info, signatures)?;
    let mut inline = Vec::new();
    clause.condition().compile(&mut inline);
    inline.push(AsmItem::PushLabel("ok".into()));
    inline.push(AsmItem::Op(Opcode::JUMPI));
    inline.extend([
        AsmItem::push_value(0u8),
        AsmItem::Op(Opcode::DUP1),
        AsmItem::Op(Opcode::REVERT),
    ]);
    inline.push(AsmItem::Label("ok".into()));
    let instance = make_instance(
        TemplateId::AddRequire.as_str(),
        PatchMode::InsertBefore,
        None,
        inline,
        Vec::new(),
    )?;
    let point = PatchPoint::locate(cfg, entry.entry, "access_control")
        .map_err(|e| TemplateError::FunctionNotFound(e.to_string()))?;
    Ok((point, instance))
}

/// Route the selector's dispatcher comparison to a revert stub. The body
/// keeps its address, so internal jumps into it still work.
pub fn specialize_delete_public_function(
    func: &FunctionRef,
    info: &DispatcherInfo,
    cfg: &PartialCfg,
    signatures: &[String],
) -> Result<(PatchPoint, TemplateInstance), TemplateError> {
    let entry = lookup(func, info, signatures)?;
    let point = PatchPoint::locate(cfg, entry.push_pc, "access_control")
        .map_err(|e| TemplateError::FunctionNotFound(e.to_string()))?;
    let instance = make_instance(
        TemplateId::DeletePublicFunction.as_str(),
        PatchMode::Replace,
        Some(Opcode::PUSH2),
        vec![AsmItem::PushLabel("revert".into())],
        vec![
            AsmItem::Label("revert".into()),
            AsmItem::push_value(0u8),
            AsmItem::Op(Opcode::DUP1),
            AsmItem::Op(Opcode::REVERT),
        ],
    )?;
    Ok((point, instance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_resolution() {
        let sigs = vec![
            "initWallet(address[],uint256,uint256)".to_string(),
            "initDaylimit(uint256)".to_string(),
            "isOwner(address)".to_string(),
        ];
        let want = Selector::from_signature("initDaylimit(uint256)");
        assert_eq!(resolve_function(&FunctionRef::Name("initDaylimit".into()), &sigs).unwrap(), want);
        assert_eq!(resolve_function(&FunctionRef::Name("initDayLimit".into()), &sigs).unwrap(), want);
        assert!(matches!(
            resolve_function(&FunctionRef::Name("kill".into()), &sigs),
            Err(TemplateError::FunctionNotFound(_))
        ));
        let dup = vec!["f(uint256)".to_string(), "f(address)".to_string()];
        assert!(matches!(
            resolve_function(&FunctionRef::Name("f".into()), &dup),
            Err(TemplateError::AmbiguousFunction { .. })
        ));
    }

    #[test]
    fn handwritten_code_has_no_dispatcher() {
        let code = crate::asm::parse_hex("6001600101").unwrap();
        let program = crate::asm::disassemble(&code);
        let cfg = crate::cfg::recover_blocks(&program, &crate::asm::jumpdest_analysis(&code));
        assert!(matches!(
            locate_dispatcher(&program, &cfg),
            Err(TemplateError::DispatcherNotRecognized(_))
        ));
    }

    #[test]
    fn fallback_only_contract() {
        // Prologue, then STOP.
        let code = crate::asm::parse_hex("608060405200").unwrap();
        let program = crate::asm::disassemble(&code);
        let cfg = crate::cfg::recover_blocks(&program, &crate::asm::jumpdest_analysis(&code));
        let info = locate_dispatcher(&program, &cfg).unwrap();
        assert!(info.entries.is_empty());
        assert!(info.prologue);
    }
}
