//! Hand-assembled contracts in the shape a Solidity compiler emits: the
//! free-memory prologue, a selector dispatcher, a callvalue check per
//! function, and mapping slots derived with SHA3.
//!
//! They drive the end-to-end tests and the CLI demo fixtures.

use crate::builder::Assembler;
use crate::hash::Selector;
use crate::minievm::{address_to_word, Account, Address, Transaction, WorldState};
use crate::opcode::Opcode as O;
use crate::templates::{ReportEntry, VulnerabilityReport};
use primitive_types::{H160, U256};
use std::collections::{BTreeMap, BTreeSet};

/// `PUSH1 1; PUSH1 1; ADD; JUMPDEST; STOP`.
pub const ADD_PROGRAM: &str = "60016001015b00";

pub const TX_GAS: u64 = 1_000_000;

pub fn addr(n: u64) -> Address {
    H160::from_low_u64_be(n)
}

/// A contract with its source-level names.
#[derive(Clone, Debug)]
pub struct SampleContract {
    pub name: &'static str,
    pub code: Vec<u8>,
    pub signatures: Vec<String>,
    /// Marked program counters, e.g. the vulnerable instruction.
    pub marks: BTreeMap<String, usize>,
}

/// A world, a corpus, and the report an external detector would emit.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub contract: Address,
    pub code: Vec<u8>,
    pub world: WorldState,
    pub transactions: Vec<Transaction>,
    pub known_attacks: BTreeSet<String>,
    pub report: VulnerabilityReport,
    pub signatures: Vec<String>,
}

fn word(v: impl Into<U256>) -> [u8; 32] {
    let mut out = [0u8; 32];
    v.into().to_big_endian(&mut out);
    out
}

/// ABI calldata for `sig` with static words followed by one optional
/// trailing dynamic address array, whose head slot is `array_at`.
fn calldata(sig: &str, words: &[U256], array: Option<(usize, &[Address])>) -> Vec<u8> {
    let mut data = Selector::from_signature(sig).0.to_vec();
    let head_len = words.len() + usize::from(array.is_some());
    let mut head: Vec<U256> = words.to_vec();
    if let Some((at, _)) = array {
        head.insert(at, U256::from(32 * head_len));
    }
    for w in head {
        data.extend_from_slice(&word(w));
    }
    if let Some((_, items)) = array {
        data.extend_from_slice(&word(items.len()));
        for a in items {
            data.extend_from_slice(&word(address_to_word(a)));
        }
    }
    data
}

fn prologue_and_dispatch(a: &mut Assembler, functions: &[(&str, &str)]) {
    a.push(0x80u8).push(0x40u8).op(O::MSTORE);
    a.push(4u8).op(O::CALLDATASIZE).op(O::LT).jumpi("fallback");
    a.push(0u8).op(O::CALLDATALOAD).push(0xe0u8).op(O::SHR);
    for (sig, label) in functions {
        a.op(O::DUP1)
            .push(Selector::from_signature(sig).as_u32())
            .op(O::EQ)
            .jumpi(label);
    }
    a.label("fallback");
    a.revert_empty();
}

/// Function entry with the non-payable check.
fn entry(a: &mut Assembler, label: &str) {
    let body = format!("{label}:body");
    a.label(label);
    a.op(O::CALLVALUE).op(O::DUP1).op(O::ISZERO).jumpi(&body);
    a.revert_empty();
    a.label(&body);
    a.op(O::POP);
}

/// Address on top of the stack -> mapping slot `keccak(addr . base)`.
fn mapping_slot(a: &mut Assembler, base: u8) {
    a.push(0u8).op(O::MSTORE);
    a.push(base).push(0x20u8).op(O::MSTORE);
    a.push(0x40u8).push(0u8).op(O::SHA3);
}

fn return_word(a: &mut Assembler) {
    a.push(0u8).op(O::MSTORE).push(0x20u8).push(0u8).op(O::RETURN);
}

/// Slot of `key` in a mapping declared at `base`.
pub fn mapping_key(key: &Address, base: u64) -> U256 {
    let mut buf = word(address_to_word(key)).to_vec();
    buf.extend_from_slice(&word(base));
    U256::from_big_endian(crate::hash::keccak256(&buf).as_bytes())
}

pub mod bec {
    //! A token with the `batchTransfer` multiplication overflow.
    use super::*;

    pub const SIGNATURES: [&str; 3] = [
        "balanceOf(address)",
        "transfer(address,uint256)",
        "batchTransfer(address[],uint256)",
    ];

    pub fn contract() -> SampleContract {
        let mut a = Assembler::new();
        prologue_and_dispatch(
            &mut a,
            &[
                (SIGNATURES[0], "balanceOf"),
                (SIGNATURES[1], "transfer"),
                (SIGNATURES[2], "batchTransfer"),
            ],
        );

        entry(&mut a, "balanceOf");
        a.push(4u8).op(O::CALLDATALOAD);
        mapping_slot(&mut a, 0);
        a.op(O::SLOAD);
        return_word(&mut a);

        entry(&mut a, "transfer");
        a.push(0x24u8).op(O::CALLDATALOAD);
        a.op(O::CALLER);
        mapping_slot(&mut a, 0);
        a.op(O::SLOAD);
        // require(value <= balance)
        a.ops(&[O::DUP2, O::DUP2, O::LT]).jumpi("fail");
        a.ops(&[O::DUP2, O::SWAP1]).mark("transfer:sub").op(O::SUB);
        a.op(O::CALLER);
        mapping_slot(&mut a, 0);
        a.op(O::SSTORE);
        a.push(4u8).op(O::CALLDATALOAD);
        mapping_slot(&mut a, 0);
        a.ops(&[O::DUP1, O::SLOAD, O::DUP3]).mark("transfer:add").op(O::ADD);
        a.ops(&[O::SWAP1, O::SSTORE, O::POP]).push(1u8);
        return_word(&mut a);

        entry(&mut a, "batchTransfer");
        a.push(4u8).op(O::CALLDATALOAD).push(4u8).op(O::ADD);
        a.ops(&[O::DUP1, O::CALLDATALOAD]);
        a.push(0x24u8).op(O::CALLDATALOAD);
        // amount = cnt * value
        a.ops(&[O::DUP1, O::DUP3]).mark("batchTransfer:mul").op(O::MUL);
        // require(cnt > 0 && cnt <= 20)
        a.ops(&[O::DUP3, O::ISZERO]).jumpi("fail");
        a.push(20u8).ops(&[O::DUP4, O::GT]).jumpi("fail");
        // require(value > 0 && balances[msg.sender] >= amount)
        a.ops(&[O::DUP2, O::ISZERO]).jumpi("fail");
        a.op(O::CALLER);
        mapping_slot(&mut a, 0);
        a.op(O::SLOAD);
        a.ops(&[O::DUP2, O::DUP2, O::LT]).jumpi("fail");
        a.op(O::SUB).op(O::CALLER);
        mapping_slot(&mut a, 0);
        a.op(O::SSTORE);
        a.push(0u8);
        a.label("batch:loop");
        a.ops(&[O::DUP3, O::DUP2, O::LT, O::ISZERO]).jumpi("batch:done");
        a.ops(&[O::DUP1]).push(0x20u8).ops(&[O::MUL, O::DUP5, O::ADD]).push(0x20u8);
        a.ops(&[O::ADD, O::CALLDATALOAD]);
        mapping_slot(&mut a, 0);
        a.ops(&[O::DUP1, O::SLOAD, O::DUP4, O::ADD, O::SWAP1, O::SSTORE]);
        a.push(1u8).op(O::ADD).jump("batch:loop");
        a.label("batch:done");
        a.push(1u8);
        return_word(&mut a);

        a.label("fail");
        a.revert_empty();

        let built = a.build().expect("token assembles");
        SampleContract {
            name: "bec_token",
            code: built.code,
            signatures: SIGNATURES.iter().map(|s| s.to_string()).collect(),
            marks: built
                .labels
                .into_iter()
                .filter(|(k, _)| k.contains(':') && !k.ends_with(":body"))
                .collect(),
        }
    }

    pub fn transfer(to: Address, value: impl Into<U256>) -> Vec<u8> {
        calldata(SIGNATURES[1], &[address_to_word(&to), value.into()], None)
    }

    pub fn batch_transfer(receivers: &[Address], value: impl Into<U256>) -> Vec<u8> {
        calldata(SIGNATURES[2], &[value.into()], Some((0, receivers)))
    }

    pub fn balance_of(who: Address) -> Vec<u8> {
        calldata(SIGNATURES[0], &[address_to_word(&who)], None)
    }

    pub fn balance_slot(who: &Address) -> U256 {
        mapping_key(who, 0)
    }

    pub const CONTRACT: u64 = 0xbec0;
    pub const ATTACKER: u64 = 0xa77ac;

    fn holders() -> Vec<Address> {
        (1..=8).map(|i| addr(0x1000 + i)).collect()
    }

    /// `benign` transfers among eight holders, a few benign batch
    /// transfers, and one overflowing batch transfer.
    pub fn scenario(benign: usize) -> Scenario {
        let c = contract();
        let contract = addr(CONTRACT);
        let holders = holders();
        let attacker = addr(ATTACKER);
        let mut account = Account::with_code(c.code.clone());
        for h in &holders {
            account.storage.insert(balance_slot(h), U256::from(1_000_000u64));
        }
        account.storage.insert(balance_slot(&attacker), U256::from(10u64));
        let mut world = WorldState::default();
        world.insert(contract, account);
        for h in holders.iter().chain([&attacker]) {
            world.set_balance(*h, U256::exp10(18));
        }

        let mut txs = Vec::new();
        for i in 0..benign {
            let from = holders[i % holders.len()];
            let to = holders[(i * 3 + 1) % holders.len()];
            let tx = Transaction::call(from, contract, transfer(to, 10 + i as u64), TX_GAS);
            txs.push(tx.with_id(format!("transfer-{i}")));
        }
        for i in 0..5 {
            let from = holders[i];
            let data = batch_transfer(&[holders[(i + 1) % 8], holders[(i + 2) % 8]], 100u64);
            txs.push(Transaction::call(from, contract, data, TX_GAS).with_id(format!("batch-{i}")));
        }
        let value = (U256::one() << 255) + U256::one();
        let data = batch_transfer(&[addr(0xb0b1), addr(0xb0b2)], value);
        txs.push(Transaction::call(attacker, contract, data, TX_GAS).with_id("attack"));
        for i in 0..3 {
            let tx = Transaction::call(holders[i], contract, balance_of(holders[i]), TX_GAS);
            txs.push(tx.with_id(format!("balance-{i}")));
        }

        let report = VulnerabilityReport {
            contract: format!("{contract:?}"),
            entries: vec![ReportEntry {
                pc: c.marks["batchTransfer:mul"],
                kind: "int_mul_overflow".into(),
                selector: Some(Selector::from_signature(SIGNATURES[2]).to_string()),
                note: Some("amount = cnt * value".into()),
                signed: false,
            }],
            blacklist: Vec::new(),
        };
        Scenario {
            contract,
            code: c.code,
            world,
            transactions: txs,
            known_attacks: BTreeSet::from(["attack".to_string()]),
            report,
            signatures: c.signatures,
        }
    }
}

pub mod wallet {
    //! A multi-owner wallet whose initializers were left public.
    use super::*;

    pub const SIGNATURES: [&str; 6] = [
        "initWallet(address[],uint256,uint256)",
        "initMultiowned(address[],uint256)",
        "initDaylimit(uint256)",
        "isOwner(address)",
        "m_numOwners()",
        "kill(address)",
    ];

    pub const SLOT_NUM_OWNERS: u64 = 0;
    pub const SLOT_REQUIRED: u64 = 1;
    pub const SLOT_DAILY_LIMIT: u64 = 2;
    /// Owner index mapping.
    pub const OWNER_MAP_BASE: u64 = 3;

    /// The patch that closes the re-initialization hole.
    pub const PATCH_DSL: &str = "\
add_require_patch:
  initWallet:
    - sload(m_numOwner) == 0

delete_public_function_patch:
  - initDayLimit
  - initMultiowned
";

    pub fn storage_names() -> BTreeMap<String, U256> {
        BTreeMap::from([
            ("m_numOwner".to_string(), U256::from(SLOT_NUM_OWNERS)),
            ("m_numOwners".to_string(), U256::from(SLOT_NUM_OWNERS)),
            ("m_required".to_string(), U256::from(SLOT_REQUIRED)),
            ("m_dailyLimit".to_string(), U256::from(SLOT_DAILY_LIMIT)),
        ])
    }

    pub fn contract() -> SampleContract {
        let mut a = Assembler::new();
        let labels = ["initWallet", "initMultiowned", "initDaylimit", "isOwner", "numOwners", "kill"];
        let table: Vec<(&str, &str)> = SIGNATURES.iter().copied().zip(labels).collect();
        prologue_and_dispatch(&mut a, &table);

        entry(&mut a, "initWallet");
        a.push_label("initWallet:owners");
        a.push(0x44u8).op(O::CALLDATALOAD).jump("int:daylimit");
        a.label("initWallet:owners");
        a.push_label("stop");
        a.push(0x24u8).op(O::CALLDATALOAD);
        a.push(4u8).op(O::CALLDATALOAD).push(4u8).op(O::ADD);
        a.jump("int:multiowned");

        entry(&mut a, "initMultiowned");
        a.push_label("stop");
        a.push(0x24u8).op(O::CALLDATALOAD);
        a.push(4u8).op(O::CALLDATALOAD).push(4u8).op(O::ADD);
        a.jump("int:multiowned");

        entry(&mut a, "initDaylimit");
        a.push_label("stop");
        a.push(4u8).op(O::CALLDATALOAD).jump("int:daylimit");

        entry(&mut a, "isOwner");
        a.push(4u8).op(O::CALLDATALOAD);
        mapping_slot(&mut a, OWNER_MAP_BASE as u8);
        a.ops(&[O::SLOAD, O::ISZERO, O::ISZERO]);
        return_word(&mut a);

        entry(&mut a, "numOwners");
        a.push(SLOT_NUM_OWNERS).op(O::SLOAD);
        return_word(&mut a);

        entry(&mut a, "kill");
        a.op(O::CALLER);
        mapping_slot(&mut a, OWNER_MAP_BASE as u8);
        a.ops(&[O::SLOAD, O::ISZERO]).jumpi("fail");
        a.push(4u8).op(O::CALLDATALOAD).op(O::SELFDESTRUCT);

        // [limit, ret]
        a.label("int:daylimit");
        a.push(SLOT_DAILY_LIMIT).op(O::SSTORE).op(O::JUMP);

        // [ptr, required, ret]; ptr is the calldata offset of the length.
        a.label("int:multiowned");
        a.ops(&[O::DUP1, O::CALLDATALOAD, O::DUP1]).push(SLOT_NUM_OWNERS).op(O::SSTORE);
        a.push(0u8);
        a.label("multi:loop");
        a.ops(&[O::DUP2, O::DUP2, O::LT, O::ISZERO]).jumpi("multi:done");
        a.op(O::DUP1).push(0x20u8).ops(&[O::MUL, O::DUP4, O::ADD]).push(0x20u8);
        a.ops(&[O::ADD, O::CALLDATALOAD]);
        mapping_slot(&mut a, OWNER_MAP_BASE as u8);
        a.ops(&[O::DUP2]).push(1u8).ops(&[O::ADD, O::SWAP1, O::SSTORE]);
        a.push(1u8).op(O::ADD).jump("multi:loop");
        a.label("multi:done");
        a.ops(&[O::POP, O::POP, O::POP]).push(SLOT_REQUIRED).op(O::SSTORE).op(O::JUMP);

        a.label("stop");
        a.op(O::STOP);
        a.label("fail");
        a.revert_empty();

        let built = a.build().expect("wallet assembles");
        SampleContract {
            name: "multiowned_wallet",
            code: built.code,
            signatures: SIGNATURES.iter().map(|s| s.to_string()).collect(),
            marks: built
                .labels
                .into_iter()
                .filter(|(k, _)| k.starts_with("int:"))
                .collect(),
        }
    }

    pub fn init_wallet(owners: &[Address], required: u64, daylimit: u64) -> Vec<u8> {
        calldata(SIGNATURES[0], &[required.into(), daylimit.into()], Some((0, owners)))
    }

    pub fn init_multiowned(owners: &[Address], required: u64) -> Vec<u8> {
        calldata(SIGNATURES[1], &[required.into()], Some((0, owners)))
    }

    pub fn init_daylimit(limit: u64) -> Vec<u8> {
        calldata(SIGNATURES[2], &[limit.into()], None)
    }

    pub fn is_owner(who: Address) -> Vec<u8> {
        calldata(SIGNATURES[3], &[address_to_word(&who)], None)
    }

    pub fn num_owners() -> Vec<u8> {
        calldata(SIGNATURES[4], &[], None)
    }

    pub fn kill(to: Address) -> Vec<u8> {
        calldata(SIGNATURES[5], &[address_to_word(&to)], None)
    }

    pub fn owner_slot(who: &Address) -> U256 {
        mapping_key(who, OWNER_MAP_BASE)
    }

    pub const CONTRACT: u64 = 0x3a11e7;
    pub const OWNER_A: u64 = 0xa1;
    pub const OWNER_B: u64 = 0xb2;
    pub const ATTACKER: u64 = 0xa77ac;

    /// Initialization by the owners, benign reads, then the takeover
    /// attempts: re-initialization, the two exposed initializers, and a
    /// kill by the would-be owner.
    pub fn scenario() -> Scenario {
        let c = contract();
        let contract = addr(CONTRACT);
        let (a, b, x) = (addr(OWNER_A), addr(OWNER_B), addr(ATTACKER));
        let mut world = WorldState::default();
        world.insert(contract, Account::with_code(c.code.clone()));
        world.set_balance(contract, U256::exp10(20));
        for who in [a, b, x] {
            world.set_balance(who, U256::exp10(18));
        }
        let call = |from, data, id: &str| Transaction::call(from, contract, data, TX_GAS).with_id(id);
        let transactions = vec![
            call(a, init_wallet(&[a, b], 2, 1000), "init"),
            call(b, is_owner(a), "is-owner-a"),
            call(x, is_owner(x), "is-owner-x"),
            call(a, num_owners(), "num-owners"),
            call(x, init_wallet(&[x], 1, 0), "reinit"),
            call(x, init_multiowned(&[x], 1), "init-multiowned"),
            call(x, init_daylimit(u64::MAX), "init-daylimit"),
            call(x, kill(x), "kill"),
        ];
        Scenario {
            contract,
            code: c.code,
            world,
            transactions,
            known_attacks: ["reinit", "init-multiowned", "init-daylimit"]
                .into_iter()
                .map(String::from)
                .collect(),
            report: VulnerabilityReport {
                contract: format!("{contract:?}"),
                entries: vec![ReportEntry {
                    pc: 0,
                    kind: "access_control".into(),
                    selector: None,
                    note: Some("initializers callable after initialization".into()),
                    signed: false,
                }],
                blacklist: Vec::new(),
            },
            signatures: c.signatures,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minievm::execute;

    #[test]
    fn token_moves_balances() {
        let s = bec::scenario(4);
        let mut world = s.world.clone();
        for tx in &s.transactions {
            let (next, r) = execute(&world, &tx.env());
            if tx.id.as_deref() != Some("attack") {
                assert!(r.is_success(), "{:?} {:?}", tx.id, r.halt);
            }
            world = next;
        }
        let victim = addr(0xb0b1);
        let got = world.sload(&s.contract, &bec::balance_slot(&victim));
        assert_eq!(got, (U256::one() << 255) + U256::one());
    }

    #[test]
    fn wallet_reinit_takes_over() {
        let s = wallet::scenario();
        let mut world = s.world.clone();
        for tx in &s.transactions {
            let (next, r) = execute(&world, &tx.env());
            assert!(r.is_success(), "{:?} {:?}", tx.id, r.halt);
            if tx.id.as_deref() == Some("is-owner-a") {
                assert_eq!(r.return_data[31], 1);
            }
            world = next;
        }
        assert!(world.code(&s.contract).is_empty());
    }

    #[test]
    fn calldata_shapes() {
        let data = bec::batch_transfer(&[addr(1), addr(2)], 7u64);
        assert_eq!(data.len(), 4 + 32 * 5);
        assert_eq!(data[4 + 31], 0x40);
        assert_eq!(wallet::init_wallet(&[addr(1)], 1, 2).len(), 4 + 32 * 5);
    }
}
