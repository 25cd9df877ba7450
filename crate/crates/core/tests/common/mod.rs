//! Shared generators and checks for the property and acceptance suites.
#![allow(dead_code)]

use bytepatch_core::asm::{disassemble, jumpdest_analysis};
use bytepatch_core::builder::{assemble_items, AsmItem};
use bytepatch_core::cfg::{recover_blocks, BasicBlock, Terminator};
use bytepatch_core::difftester::{replay_pair, DiffReport, ReplayOptions};
use bytepatch_core::minievm::{address_to_word, Address, EvmConfig, Evm, Transaction, WorldState};
use bytepatch_core::opcode::Opcode;
use bytepatch_core::rewriter::{rewrite, PatchPoint, RewriteResult, TRAMPOLINE_GAS, REJOIN_GAS};
use bytepatch_core::templates::{
    checked_add_instance, checked_mul_instance, checked_sub_instance, identity_instance,
    TemplateInstance,
};
use rand::Rng;
use std::collections::BTreeSet;

pub struct GenProgram {
    pub code: Vec<u8>,
    /// pcs of arithmetic instructions and their opcode.
    pub arith: Vec<(usize, Opcode)>,
}

/// A program of jump-connected blocks doing arithmetic and storage
/// writes. Every stack access is valid, so it also runs. With
/// `adversarial_tail`, a data section follows that ends in a cut-off
/// PUSH32 full of 0x5b bytes.
pub fn random_program(rng: &mut impl Rng, adversarial_tail: bool) -> GenProgram {
    let blocks = rng.gen_range(1..8);
    let labeled: Vec<bool> = (0..blocks).map(|i| i > 0 && rng.gen_bool(0.7)).collect();
    let mut items = Vec::new();
    let mut marks = Vec::new();
    for i in 0..blocks {
        if labeled[i] {
            items.push(AsmItem::Label(format!("b{i}")));
        }
        for _ in 0..rng.gen_range(1..5) {
            match rng.gen_range(0..4) {
                0 | 1 => {
                    let op = [Opcode::ADD, Opcode::SUB, Opcode::MUL][rng.gen_range(0..3)];
                    items.push(AsmItem::push_value(rng.gen_range(0u64..1000)));
                    items.push(AsmItem::push_value(rng.gen_range(0u64..1000)));
                    let name = format!("m{}", marks.len());
                    items.push(AsmItem::Mark(name.clone()));
                    marks.push((name, op));
                    items.push(AsmItem::Op(op));
                    items.push(AsmItem::push_value(rng.gen_range(0u64..4)));
                    items.push(AsmItem::Op(Opcode::SSTORE));
                }
                2 => {
                    items.push(AsmItem::push_value(rng.gen::<u64>()));
                    items.push(AsmItem::Op(Opcode::POP));
                }
                _ => {
                    items.push(AsmItem::push_value(rng.gen_range(0u64..4)));
                    items.push(AsmItem::Op(Opcode::SLOAD));
                    items.push(AsmItem::Op(Opcode::POP));
                }
            }
        }
        let later: Vec<usize> = (i + 1..blocks).filter(|&j| labeled[j]).collect();
        let last = i + 1 == blocks;
        match rng.gen_range(0..4) {
            _ if last => items.push(AsmItem::Op(Opcode::STOP)),
            0 if !later.is_empty() => {
                let j = later[rng.gen_range(0..later.len())];
                items.push(AsmItem::push_value(rng.gen_range(0u64..2)));
                items.push(AsmItem::PushLabel(format!("b{j}")));
                items.push(AsmItem::Op(Opcode::JUMPI));
            }
            1 if !later.is_empty() => {
                let j = later[rng.gen_range(0..later.len())];
                items.push(AsmItem::PushLabel(format!("b{j}")));
                items.push(AsmItem::Op(Opcode::JUMP));
            }
            _ => {}
        }
    }
    if adversarial_tail {
        let mut data: Vec<u8> = (0..rng.gen_range(0..40))
            .map(|_| if rng.gen_bool(0.5) { 0x5b } else { rng.gen() })
            .collect();
        data.push(0x7f);
        data.extend(std::iter::repeat_n(0x5b, rng.gen_range(0..32)));
        items.push(AsmItem::Raw(data));
    }
    let built = assemble_items(&items, 0).expect("generated program assembles");
    let arith = marks.iter().map(|(n, op)| (built.labels[n], *op)).collect();
    GenProgram {
        code: built.code,
        arith,
    }
}

pub fn instance_for(op: Opcode) -> TemplateInstance {
    match op {
        Opcode::ADD => checked_add_instance(),
        Opcode::SUB => checked_sub_instance(),
        _ => checked_mul_instance(),
    }
}

pub fn locate(code: &[u8], pc: usize, kind: &str) -> PatchPoint {
    let cfg = recover_blocks(&disassemble(code), &jumpdest_analysis(code));
    PatchPoint::locate(&cfg, pc, kind).expect("patch point in code")
}

/// Checks that the rewrite kept every original address meaningful.
/// Returns a description of the first violation.
pub fn address_preservation_violation(original: &[u8], out: &RewriteResult) -> Option<String> {
    let patched = &out.patched_code;
    let in_trampoline = |pc: usize| {
        out.trampolines
            .iter()
            .any(|t| (t.block_start..t.block_end).contains(&pc))
    };
    for (pc, byte) in original.iter().enumerate() {
        if !in_trampoline(pc) && patched[pc] != *byte {
            return Some(format!("byte {pc:#x} changed"));
        }
    }
    // Blocks that began with JUMPDEST still do.
    let before = jumpdest_analysis(original);
    let after = jumpdest_analysis(patched);
    for pc in before.iter() {
        if !after.contains(pc) {
            return Some(format!("JUMPDEST {pc:#x} lost"));
        }
    }
    if patched[original.len()..out.appended_region_start].iter().any(|b| *b != 0) {
        return Some("padding is not zero".into());
    }
    // The appended region decodes from its first byte, and every
    // JUMPDEST in it is a valid destination of the whole program.
    let full = disassemble(patched);
    if out.appended_region_start < patched.len() && full.index_of(out.appended_region_start).is_none() {
        return Some("appended region starts inside an instruction".into());
    }
    for ins in full.instructions.iter().filter(|i| i.offset >= out.appended_region_start) {
        if ins.opcode == Opcode::JUMPDEST && !after.contains(ins.offset) {
            return Some(format!("appended JUMPDEST {:#x} invalid", ins.offset));
        }
    }
    for t in &out.trampolines {
        if !after.contains(t.target) {
            return Some(format!("trampoline target {:#x} invalid", t.target));
        }
    }
    None
}

/// Blocks that end by falling into a JUMPDEST block: patching them with
/// the identity template costs exactly one trampoline and one rejoin.
pub fn rejoining_blocks(code: &[u8]) -> Vec<BasicBlock> {
    let cfg = recover_blocks(&disassemble(code), &jumpdest_analysis(code));
    cfg.blocks
        .iter()
        .filter(|b| {
            b.terminator == Terminator::Fallthrough
                && cfg.successor(b).is_some_and(|s| s.starts_with_jumpdest)
                && b.len() >= 4 + usize::from(b.starts_with_jumpdest)
        })
        .copied()
        .collect()
}

pub struct IdentityOutcome {
    pub report: DiffReport,
    pub patched_blocks: usize,
    /// Transactions whose gas delta is not 23 per traversal.
    pub gas_mismatches: Vec<String>,
    pub traversals: u64,
}

/// Identity-patch every rejoining block, replay, and compare the gas delta
/// of each transaction with 23 times its trampoline traversals.
pub fn identity_equivalence(
    world: &WorldState,
    contract: Address,
    code: &[u8],
    txs: &[Transaction],
) -> Option<IdentityOutcome> {
    let blocks = rejoining_blocks(code);
    if blocks.is_empty() {
        return None;
    }
    let patches: Vec<_> = blocks
        .iter()
        .map(|b| (locate(code, b.start, "probe"), identity_instance()))
        .collect();
    let out = rewrite(code, &patches).expect("identity rewrite");
    let options = ReplayOptions {
        evm: EvmConfig {
            coverage: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = replay_pair(world, contract, code, &out.patched_code, txs, &BTreeSet::new(), &options)
        .expect("replay");

    // Re-run the patched side to count trampoline entries per tx.
    let evm = Evm::new(options.evm.clone());
    let mut w = world.clone();
    w.set_code(contract, out.patched_code.clone());
    let mut gas_mismatches = Vec::new();
    let mut traversals = 0;
    for (tx, verdict) in txs.iter().zip(&report.transactions) {
        let (next, r) = evm.execute(&w, &tx.env());
        let hits: u64 = blocks.iter().map(|b| r.hits(&contract, b.start)).sum();
        traversals += hits;
        let delta = verdict.patched_gas as i64 - verdict.original_gas as i64;
        if delta != ((TRAMPOLINE_GAS + REJOIN_GAS) * hits) as i64 {
            gas_mismatches.push(format!("{}: delta {delta}, {hits} traversals", verdict.id));
        }
        w = next;
    }
    Some(IdentityOutcome {
        report,
        patched_blocks: blocks.len(),
        gas_mismatches,
        traversals,
    })
}

/// Outcome of driving a token through deploy, traffic, upgrade, traffic.
pub struct Lifecycle {
    /// Every property that did not hold.
    pub failures: Vec<String>,
    pub switchover_gas: u64,
    /// Successful calls whose trace held exactly one faithful DELEGATECALL.
    pub delegatecalls_checked: usize,
}

fn retarget(txs: &[Transaction], to: Address) -> Vec<Transaction> {
    txs.iter()
        .map(|t| Transaction {
            to: Some(to),
            ..t.clone()
        })
        .collect()
}

fn storage_without(world: &WorldState, at: &Address, reserved: &[primitive_types::U256]) -> Vec<(primitive_types::U256, primitive_types::U256)> {
    world
        .storage(at)
        .map(|s| {
            s.iter()
                .filter(|(k, v)| !v.is_zero() && !reserved.contains(k))
                .map(|(k, v)| (*k, *v))
                .collect()
        })
        .unwrap_or_default()
}

/// Run `txs` through the proxy and against a plain copy of the logic,
/// recording every observable difference.
fn compare_through_proxy(
    proxy_world: &mut WorldState,
    direct_world: &mut WorldState,
    proxy: Address,
    direct: Address,
    reserved: &[primitive_types::U256],
    txs: &[Transaction],
    failures: &mut Vec<String>,
    delegatecalls: &mut usize,
) {
    use bytepatch_core::hash::keccak256;
    use bytepatch_core::minievm::{execute, EventKind, EventParams};
    for (i, tx) in txs.iter().enumerate() {
        let label = tx.label(i);
        let via = Transaction { to: Some(proxy), ..tx.clone() };
        let plain = Transaction { to: Some(direct), ..tx.clone() };
        let (pw, pr) = execute(proxy_world, &via.env());
        let (dw, dr) = execute(direct_world, &plain.env());
        if pr.status != dr.status || pr.return_data != dr.return_data {
            failures.push(format!("{label}: proxy answered differently"));
        }
        let calls: Vec<_> = pr.trace.iter().filter(|e| e.kind == EventKind::Delegatecall).collect();
        if tx.data.len() >= 4 && pr.is_success() {
            match calls.as_slice() {
                [one] => match &one.params {
                    EventParams::Call { calldata_hash, .. } if *calldata_hash == keccak256(&tx.data) => {
                        *delegatecalls += 1
                    }
                    _ => failures.push(format!("{label}: forwarded calldata differs")),
                },
                _ => failures.push(format!("{label}: {} delegatecalls", calls.len())),
            }
        }
        *proxy_world = pw;
        *direct_world = dw;
        if storage_without(proxy_world, &proxy, reserved) != storage_without(direct_world, &direct, &[]) {
            failures.push(format!("{label}: proxy storage diverged"));
        }
    }
}

/// Deploy the token behind a proxy, serve 20 transactions, upgrade it to
/// the overflow-checked build, and serve 20 more.
pub fn proxy_lifecycle() -> Lifecycle {
    use bytepatch_core::deploy::{bundle, encode_upgrade, upgrade_calldata};
    use bytepatch_core::minievm::execute;
    use bytepatch_core::samples::{addr, bec};
    use bytepatch_core::templates::specialize_report;

    let mut failures = Vec::new();
    let mut delegatecalls = 0;
    let s = bec::scenario(31);
    let spec = specialize_report(&s.code, &s.report, None, &s.signatures).expect("token report");
    let patched = rewrite(&s.code, &spec.patches).expect("token rewrite").patched_code;
    let owner = addr(0x0e);
    let direct = addr(0xd1);

    let b = bundle(&s.code, owner, 0).expect("bundle");
    let mut world = s.world.clone();
    for tx in &b.transactions {
        let (next, r) = execute(&world, &tx.env());
        if !r.is_success() {
            failures.push(format!("{} failed: {:?}", tx.label(0), r.status));
        }
        world = next;
    }
    if world.code(&b.proxy).as_slice() != b.proxy_code.as_slice() {
        failures.push("proxy code not installed".into());
    }
    let reserved = [b.config.implementation_slot, b.config.owner_slot];
    // Seed both with the token's balances.
    let mut direct_world = s.world.clone();
    direct_world.set_code(direct, s.code.clone());
    for (k, v) in s.world.storage(&s.contract).cloned().unwrap_or_default() {
        world.sstore(b.proxy, k, v);
        direct_world.sstore(direct, k, v);
    }

    let txs = retarget(&s.transactions, b.proxy);
    let (first, second) = (&txs[..20], &txs[20..]);
    compare_through_proxy(&mut world, &mut direct_world, b.proxy, direct, &reserved, first, &mut failures, &mut delegatecalls);

    // Upgrade.
    let nonce = world.account(&owner).map_or(0, |a| a.nonce);
    let plan = encode_upgrade(b.proxy, owner, nonce, &patched).expect("plan");
    let (deployed, r) = execute(&world, &plan.transactions[0].env());
    if !r.is_success() || r.created != Some(plan.new_logic) {
        failures.push("new logic not deployed where planned".into());
    }
    let stranger = Transaction::call(addr(0x666), b.proxy, upgrade_calldata(plan.new_logic), 100_000);
    let (after_stranger, r) = execute(&deployed, &stranger.env());
    if r.is_success() || after_stranger.storage(&b.proxy) != deployed.storage(&b.proxy) {
        failures.push("a stranger could upgrade".into());
    }
    let (upgraded, r) = execute(&deployed, &plan.switchover().env());
    let switchover_gas = r.gas_used;
    if !r.is_success() {
        failures.push(format!("switchover failed: {:?}", r.status));
    }
    let mut before = deployed.storage(&b.proxy).cloned().unwrap_or_default();
    before.insert(b.config.implementation_slot, address_to_word(&plan.new_logic));
    if upgraded.storage(&b.proxy).cloned().unwrap_or_default() != before {
        failures.push("switchover touched more than the implementation slot".into());
    }
    for a in deployed.accounts.keys() {
        if *a != b.proxy && deployed.storage(a) != upgraded.storage(a) {
            failures.push(format!("switchover touched storage of {a:?}"));
        }
    }

    // The switchover costs the same however much state the proxy holds.
    let gas_with = |slots: u64| {
        let mut w = deployed.clone();
        for k in 0..slots {
            w.sstore(b.proxy, (k + 0x10_0000).into(), 1u64.into());
        }
        execute(&w, &plan.switchover().env()).1.gas_used
    };
    let (small, large) = (gas_with(1), gas_with(10_000));
    if small != large {
        failures.push(format!("switchover gas {small} vs {large}"));
    }

    world = upgraded;
    direct_world.set_code(direct, patched.clone());
    compare_through_proxy(&mut world, &mut direct_world, b.proxy, direct, &reserved, second, &mut failures, &mut delegatecalls);
    Lifecycle {
        failures,
        switchover_gas,
        delegatecalls_checked: delegatecalls,
    }
}
