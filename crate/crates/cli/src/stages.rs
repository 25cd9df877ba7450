//! Stage logic shared by the single-step subcommands and `pipeline`.

use crate::error::{exit, CliError};
use crate::io;
use bytepatch_core::difftester::{replay_pair, DiffReport, ReplayOptions};
use bytepatch_core::gas::Fork;
use bytepatch_core::minievm::{Address, EvmConfig, Fixture, Transaction, WorldState};
use bytepatch_core::rewriter::{rewrite, RewriteResult};
use bytepatch_core::templates::{
    check_stack_neutral, load_template_dir, parse_patch_dsl, specialize_report, PatchMode, TemplateError,
    VulnerabilityReport,
};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default)]
pub struct PatchInputs {
    pub code: PathBuf,
    pub report: PathBuf,
    pub dsl: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub signatures: Option<PathBuf>,
    /// Directory of `<template>.evm` files overriding built-ins by name.
    pub templates: Option<PathBuf>,
}

pub struct Patched {
    pub original: Vec<u8>,
    pub report: VulnerabilityReport,
    pub rewrite: RewriteResult,
    pub warnings: Vec<String>,
}

pub fn patch(inputs: &PatchInputs) -> Result<Patched, CliError> {
    let original = io::read_code(&inputs.code)?;
    let report = VulnerabilityReport::from_json(&io::read_text(&inputs.report)?)
        .map_err(|e| CliError::input(format!("{}: {e}", inputs.report.display())))?;
    let signatures = match &inputs.signatures {
        Some(p) => io::read_signatures(p)?,
        None => Vec::new(),
    };
    let names = match &inputs.names {
        Some(p) => io::read_names(p)?,
        None => BTreeMap::new(),
    };
    let dsl = match &inputs.dsl {
        Some(p) => Some(parse_patch_dsl(&io::read_text(p)?, &names).map_err(TemplateError::from)?),
        None => None,
    };
    let mut spec = specialize_report(&original, &report, dsl.as_ref(), &signatures)?;
    if let Some(dir) = &inputs.templates {
        let overrides = load_template_dir(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
        for (_, instance) in spec.patches.iter_mut() {
            let Some(found) = overrides.get(&instance.template) else {
                continue;
            };
            let text = found.clone()?;
            let replacement = text.instantiate(&BTreeMap::new())?;
            if replacement.mode == PatchMode::Replace {
                check_stack_neutral(&replacement)?;
            }
            spec.warnings.push(format!("template `{}` loaded from {}", instance.template, dir.display()));
            *instance = replacement;
        }
    }
    let rewrite = rewrite(&original, &spec.patches)?;
    Ok(Patched {
        original,
        report,
        rewrite,
        warnings: spec.warnings,
    })
}

pub fn rewrite_summary(p: &Patched) -> Value {
    let mut v = p.rewrite.summary();
    v["warnings"] = json!(p.warnings);
    v
}

#[derive(Clone, Debug, Default)]
pub struct ReplayInputs {
    /// Fixture with accounts; its transactions are used unless `txs` is set.
    pub world: PathBuf,
    pub txs: Option<PathBuf>,
    pub contract: Option<String>,
    pub known_attacks: Vec<String>,
    pub fork: Option<String>,
    pub step_limit: Option<u64>,
    pub strict_logs: bool,
}

pub struct Replayed {
    pub report: DiffReport,
}

fn evm_config(inputs: &ReplayInputs) -> Result<EvmConfig, CliError> {
    let mut evm = EvmConfig::default();
    if let Some(f) = &inputs.fork {
        evm.fork = f.parse::<Fork>().map_err(CliError::Input)?;
    }
    if let Some(limit) = inputs.step_limit {
        evm.step_limit = limit;
    }
    Ok(evm)
}

fn pick_contract(world: &WorldState, explicit: Option<&str>, fallback: Option<&str>) -> Result<Address, CliError> {
    if let Some(text) = explicit.or(fallback.filter(|s| !s.is_empty())) {
        return io::parse_address(text);
    }
    let with_code: Vec<_> = world
        .accounts
        .iter()
        .filter(|(_, a)| !a.code.is_empty())
        .map(|(k, _)| *k)
        .collect();
    match with_code.as_slice() {
        [only] => Ok(*only),
        _ => Err(CliError::input(
            "cannot tell which account is the contract; pass --contract",
        )),
    }
}

pub fn replay(
    inputs: &ReplayInputs,
    original: &[u8],
    patched: &[u8],
    report_contract: Option<&str>,
    patch_regions: Vec<Range<usize>>,
) -> Result<Replayed, CliError> {
    let fixture: Fixture = io::read_json(&inputs.world)?;
    let world = fixture.world();
    let txs: Vec<Transaction> = match &inputs.txs {
        Some(p) => bytepatch_core::minievm::parse_transactions(&io::read_text(p)?)
            .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        None => fixture.transactions.clone(),
    };
    let contract = pick_contract(&world, inputs.contract.as_deref(), report_contract)?;
    let mut world = world;
    // The fixture may hold any code for the contract; replay the given one.
    world.set_code(contract, original.to_vec());
    let known: BTreeSet<String> = inputs.known_attacks.iter().cloned().collect();
    let unknown: Vec<_> = known
        .iter()
        .filter(|id| !txs.iter().enumerate().any(|(i, t)| &t.label(i) == *id))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::input(format!("known attacks not in the fixture: {unknown:?}")));
    }
    let options = ReplayOptions {
        evm: evm_config(inputs)?,
        strict_logs: inputs.strict_logs,
        patch_regions,
    };
    let report = replay_pair(&world, contract, original, patched, &txs, &known, &options)?;
    Ok(Replayed { report })
}

/// Accept the replay only with no primary divergence and every known
/// attack stopped.
pub fn judge(report: &DiffReport) -> Result<(), CliError> {
    let divergent: Vec<Value> = report
        .primary_divergences()
        .map(|t| {
            json!({
                "id": t.id,
                "index": t.index,
                "verdict": t.verdict,
                "mismatch": t.mismatch,
            })
        })
        .collect();
    if !divergent.is_empty() {
        let ids: Vec<&str> = divergent.iter().filter_map(|d| d["id"].as_str()).collect();
        return Err(CliError::Rejected {
            code: exit::DIVERGENCE,
            message: format!("patched code changes the behaviour of {}", ids.join(", ")),
            details: json!({ "divergent_transactions": divergent }),
        });
    }
    if report.patch_ineffective || !report.missed_attacks.is_empty() {
        return Err(CliError::Rejected {
            code: exit::MISSED_ATTACK,
            message: format!("known attacks still succeed: {}", report.missed_attacks.join(", ")),
            details: json!({ "missed_attacks": report.missed_attacks }),
        });
    }
    Ok(())
}

pub fn regions_of(r: &RewriteResult) -> Vec<Range<usize>> {
    r.template_ranges.iter().map(|&(a, b)| a..b).collect()
}

pub fn hex_file(bytes: &[u8]) -> Vec<u8> {
    format!("{}\n", bytepatch_core::asm::to_hex(bytes)).into_bytes()
}

pub fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
