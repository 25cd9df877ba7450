//! Differential replay of a transaction corpus against original and
//! patched code.
//!
//! Both runs thread their own world state through the corpus. Only
//! state-changing events are compared; program counters never are, since
//! patched code executes the same writes at other addresses.

use crate::minievm::{
    Address, Evm, EvmConfig, ExecutionTrace, FailureSite, Receipt, Status, TraceEvent, Transaction,
    WorldState,
};
use primitive_types::U256;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

/// Bumped whenever the report JSON changes incompatibly.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiffError {
    #[error("transaction {id} is sent to {to:?}, not to the contract under test {contract:?}")]
    FixtureMismatch {
        id: String,
        to: Option<Address>,
        contract: Address,
    },
    #[error("no replayed transaction reached patched code")]
    NoAffectedTransactions,
    #[error("unlimited-gas rerun of {id} hit the step limit")]
    StepLimit { id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Identical,
    AttackCandidate,
    OogRetriedThenIdentical,
    BehavioralDivergence,
}

/// First position where two filtered traces differ. A missing event means
/// one trace ended first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDivergence {
    pub index: usize,
    pub original: Option<TraceEvent>,
    pub patched: Option<TraceEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    Trace(TraceDivergence),
    Status { original: Status, patched: Status },
    ReturnData,
    Storage { slots: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxVerdict {
    pub index: usize,
    pub id: String,
    pub verdict: Verdict,
    /// An earlier transaction left the two worlds in different states.
    pub downstream_of_divergence: bool,
    pub original_status: Status,
    pub patched_status: Status,
    pub original_gas: u64,
    pub patched_gas: u64,
    /// The patched run executed appended code at the contract.
    pub reached_patch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mismatch: Option<Mismatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_failure: Option<FailureSite>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub schema_version: u32,
    pub contract: Address,
    pub transactions: Vec<TxVerdict>,
    pub counts: BTreeMap<Verdict, usize>,
    /// Mean extra gas over transactions that reached patched code and
    /// behaved identically; absent when there are none.
    pub mean_gas_overhead: Option<f64>,
    /// Some known attack was not stopped by patch code.
    pub patch_ineffective: bool,
    pub missed_attacks: Vec<String>,
}

impl DiffReport {
    pub fn count(&self, verdict: Verdict) -> usize {
        self.counts.get(&verdict).copied().unwrap_or(0)
    }

    /// Divergences not explained by an earlier transaction.
    pub fn primary_divergences(&self) -> impl Iterator<Item = &TxVerdict> {
        self.transactions
            .iter()
            .filter(|t| t.verdict == Verdict::BehavioralDivergence && !t.downstream_of_divergence)
    }

    /// Nothing diverged on its own and every known attack was caught.
    pub fn is_clean(&self) -> bool {
        self.primary_divergences().next().is_none() && !self.patch_ineffective
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReplayOptions {
    pub evm: EvmConfig,
    /// Compare LOG events too.
    pub strict_logs: bool,
    /// Byte ranges of template code in the patched contract. When empty,
    /// everything past the original code length counts.
    pub patch_regions: Vec<Range<usize>>,
}

/// Compare the state-changing events of two traces by position.
pub fn compare_traces(a: &[TraceEvent], b: &[TraceEvent], strict_logs: bool) -> Option<TraceDivergence> {
    let keep = |e: &&TraceEvent| strict_logs || !e.is_log();
    let a: Vec<&TraceEvent> = a.iter().filter(keep).collect();
    let b: Vec<&TraceEvent> = b.iter().filter(keep).collect();
    (0..a.len().max(b.len()))
        .find(|&i| a.get(i) != b.get(i))
        .map(|index| TraceDivergence {
            index,
            original: a.get(index).map(|e| (*e).clone()),
            patched: b.get(index).map(|e| (*e).clone()),
        })
}

fn storage_of(world: &WorldState, addr: &Address) -> BTreeMap<U256, U256> {
    world
        .storage(addr)
        .map(|s| s.iter().filter(|(_, v)| !v.is_zero()).map(|(k, v)| (*k, *v)).collect())
        .unwrap_or_default()
}

/// Slots whose values differ between two maps, as hex keys.
fn differing_slots(a: &BTreeMap<U256, U256>, b: &BTreeMap<U256, U256>) -> Vec<String> {
    let keys: BTreeSet<&U256> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| a.get(k) != b.get(k))
        .map(|k| format!("{k:#x}"))
        .collect()
}

/// Storage changes made by one transaction: slot -> new value.
fn storage_delta(before: &BTreeMap<U256, U256>, after: &BTreeMap<U256, U256>) -> BTreeMap<U256, U256> {
    let keys: BTreeSet<&U256> = before.keys().chain(after.keys()).collect();
    keys.into_iter()
        .filter(|k| before.get(k) != after.get(k))
        .map(|k| (*k, after.get(k).copied().unwrap_or_default()))
        .collect()
}

struct Side<'a> {
    before: &'a BTreeMap<U256, U256>,
    after: BTreeMap<U256, U256>,
    receipt: &'a Receipt,
}

/// `None` when the two runs behaved identically. Storage is compared
/// directly when both worlds started equal, otherwise by per-transaction
/// delta.
fn mismatch(orig: &Side, patched: &Side, strict_logs: bool) -> Option<Mismatch> {
    if let Some(d) = compare_traces(&orig.receipt.trace, &patched.receipt.trace, strict_logs) {
        return Some(Mismatch::Trace(d));
    }
    if orig.receipt.status != patched.receipt.status {
        return Some(Mismatch::Status {
            original: orig.receipt.status,
            patched: patched.receipt.status,
        });
    }
    if orig.receipt.return_data != patched.receipt.return_data {
        return Some(Mismatch::ReturnData);
    }
    let slots = if orig.before == patched.before {
        differing_slots(&orig.after, &patched.after)
    } else {
        differing_slots(
            &storage_delta(orig.before, &orig.after),
            &storage_delta(patched.before, &patched.after),
        )
    };
    (!slots.is_empty()).then_some(Mismatch::Storage { slots })
}

fn in_regions(pc: usize, regions: &[Range<usize>], fallback_start: usize) -> bool {
    if regions.is_empty() {
        pc >= fallback_start
    } else {
        regions.iter().any(|r| r.contains(&pc))
    }
}

/// Replay `txs` against `world0` twice: once with `original` installed at
/// `contract`, once with `patched`.
pub fn replay_pair(
    world0: &WorldState,
    contract: Address,
    original: &[u8],
    patched: &[u8],
    txs: &[Transaction],
    known_attacks: &BTreeSet<String>,
    options: &ReplayOptions,
) -> Result<DiffReport, DiffError> {
    for (i, tx) in txs.iter().enumerate() {
        if tx.to != Some(contract) {
            return Err(DiffError::FixtureMismatch {
                id: tx.label(i),
                to: tx.to,
                contract,
            });
        }
    }
    let evm = Evm::new(options.evm.clone());
    let mut world_o = world0.clone();
    world_o.set_code(contract, original.to_vec());
    let mut world_p = world0.clone();
    world_p.set_code(contract, patched.to_vec());

    let mut verdicts = Vec::with_capacity(txs.len());
    for (index, tx) in txs.iter().enumerate() {
        let id = tx.label(index);
        let env = tx.env();
        let before_o = storage_of(&world_o, &contract);
        let before_p = storage_of(&world_p, &contract);
        let downstream = before_o != before_p;

        let (next_o, ro) = evm.execute(&world_o, &env);
        let (mut next_p, mut rp) = evm.execute(&world_p, &env);
        let side = |before, world: &WorldState, receipt| Side {
            before,
            after: storage_of(world, &contract),
            receipt,
        };
        let reached_patch = rp.reached(&contract, original.len());
        let patch_failure = rp
            .failures
            .iter()
            .find(|f| {
                f.code_address == contract
                    && f.reason.status() != Status::OutOfGas
                    && in_regions(f.pc, &options.patch_regions, original.len())
            })
            .cloned();

        let mut warning = None;
        let mut found = mismatch(&side(&before_o, &next_o, &ro), &side(&before_p, &next_p, &rp), options.strict_logs);
        let verdict = if found.is_some() && !rp.is_success() && patch_failure.is_some() {
            Verdict::AttackCandidate
        } else if found.is_some() && rp.status == Status::OutOfGas && ro.status != Status::OutOfGas {
            let (retry_world, retry) = evm
                .execute_with_unlimited_gas(&world_p, &env)
                .map_err(|_| DiffError::StepLimit { id: id.clone() })?;
            let again = mismatch(
                &side(&before_o, &next_o, &ro),
                &side(&before_p, &retry_world, &retry),
                options.strict_logs,
            );
            next_p = retry_world;
            rp = retry;
            if again.is_none() {
                warning = Some(format!(
                    "needs {} gas with the patch, the transaction supplied {}",
                    rp.gas_used, tx.gas
                ));
                found = None;
                Verdict::OogRetriedThenIdentical
            } else {
                found = again;
                Verdict::BehavioralDivergence
            }
        } else if found.is_none() {
            Verdict::Identical
        } else {
            Verdict::BehavioralDivergence
        };

        verdicts.push(TxVerdict {
            index,
            id,
            verdict,
            downstream_of_divergence: downstream,
            original_status: ro.status,
            patched_status: rp.status,
            original_gas: ro.gas_used,
            patched_gas: rp.gas_used,
            reached_patch,
            mismatch: found,
            patch_failure,
            warning,
        });
        world_o = next_o;
        world_p = next_p;
    }

    let mut counts = BTreeMap::new();
    for v in &verdicts {
        *counts.entry(v.verdict).or_insert(0) += 1;
    }
    let missed_attacks: Vec<String> = known_attacks
        .iter()
        .filter(|id| {
            !verdicts
                .iter()
                .any(|v| &v.id == *id && v.verdict == Verdict::AttackCandidate)
        })
        .cloned()
        .collect();
    let mut report = DiffReport {
        schema_version: REPORT_SCHEMA_VERSION,
        contract,
        transactions: verdicts,
        counts,
        mean_gas_overhead: None,
        patch_ineffective: !missed_attacks.is_empty(),
        missed_attacks,
    };
    report.mean_gas_overhead = gas_overhead(&report).ok();
    Ok(report)
}

/// Mean of patched minus original gas over transactions that entered
/// patched code and behaved identically. Attack candidates are left out:
/// their gas measures a revert, not the cost of the check.
pub fn gas_overhead(report: &DiffReport) -> Result<f64, DiffError> {
    let deltas: Vec<f64> = report
        .transactions
        .iter()
        .filter(|t| {
            t.reached_patch
                && matches!(t.verdict, Verdict::Identical | Verdict::OogRetriedThenIdentical)
        })
        .map(|t| t.patched_gas as f64 - t.original_gas as f64)
        .collect();
    if deltas.is_empty() {
        return Err(DiffError::NoAffectedTransactions);
    }
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

/// Trace of a single run, for inspection.
pub fn trace_of(world: &WorldState, tx: &Transaction, config: &EvmConfig) -> ExecutionTrace {
    Evm::new(config.clone()).execute(world, &tx.env()).1.trace
}
