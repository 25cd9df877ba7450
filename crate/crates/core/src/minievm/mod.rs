//! A small deterministic EVM with per-instruction gas accounting and a
//! recorder for state-changing instructions.
//!
//! Gas follows a single fork table (see [`crate::gas`]); refunds and the
//! cold/warm access rules of later forks are not modelled. Transactions are
//! charged execution gas only, with no intrinsic 21000 base.

mod interp;
mod state;
mod trace;

pub use state::{
    parse_transactions, Account, Address, BlockEnv, Fixture, Transaction, TxEnv, WorldState,
};
pub use trace::{
    trace_from_json_lines, trace_to_json_lines, EventKind, EventParams, ExecutionTrace,
    TraceEvent,
};

use crate::asm::MAX_CODE_SIZE;
use crate::gas::{Fork, GasSchedule};
use crate::hash::keccak256;
use primitive_types::U256;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Instruction budget applied when gas accounting is off.
pub const DEFAULT_STEP_LIMIT: u64 = 1 << 24;

#[derive(Clone, Debug)]
pub struct EvmConfig {
    pub fork: Fork,
    pub block: BlockEnv,
    pub step_limit: u64,
    pub max_memory: usize,
    pub max_code_size: usize,
    /// Count executions per pc in [`Receipt::pc_hits`].
    pub coverage: bool,
}

impl Default for EvmConfig {
    fn default() -> Self {
        EvmConfig {
            fork: Fork::default(),
            block: BlockEnv::default(),
            step_limit: DEFAULT_STEP_LIMIT,
            max_memory: 16 << 20,
            max_code_size: MAX_CODE_SIZE,
            coverage: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Revert,
    OutOfGas,
    /// Any exceptional halt other than running out of gas.
    InvalidOpcode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "opcode")]
pub enum HaltReason {
    Revert,
    OutOfGas,
    MemoryLimit,
    StepLimit,
    InvalidOpcode(u8),
    UnsupportedOpcode(u8),
    BadJumpDestination,
    StackUnderflow,
    StackOverflow,
    StaticViolation,
    ReturnDataOutOfBounds,
    InsufficientBalance,
    CreateCollision,
    CodeSizeLimit,
}

impl HaltReason {
    pub fn status(self) -> Status {
        match self {
            HaltReason::Revert | HaltReason::InsufficientBalance => Status::Revert,
            HaltReason::OutOfGas | HaltReason::MemoryLimit | HaltReason::StepLimit => {
                Status::OutOfGas
            }
            _ => Status::InvalidOpcode,
        }
    }
}

/// Where a frame stopped abnormally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSite {
    pub code_address: Address,
    pub context: Address,
    pub pc: usize,
    pub depth: usize,
    pub reason: HaltReason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt: Option<HaltReason>,
    pub gas_used: u64,
    #[serde(with = "crate::json::bytes")]
    pub return_data: Vec<u8>,
    pub trace: ExecutionTrace,
    /// Every failed frame, innermost first.
    pub failures: Vec<FailureSite>,
    /// Highest program counter executed, per code address.
    pub max_pc: BTreeMap<Address, usize>,
    /// Executions per pc per code address; filled only with coverage on.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pc_hits: BTreeMap<Address, BTreeMap<usize, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<Address>,
    pub steps: u64,
}

impl Receipt {
    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }

    /// Whether the code at `addr` executed any pc at or above `pc`.
    pub fn reached(&self, addr: &Address, pc: usize) -> bool {
        self.max_pc.get(addr).is_some_and(|max| *max >= pc)
    }

    /// How often `pc` ran at `addr`; zero without coverage.
    pub fn hits(&self, addr: &Address, pc: usize) -> u64 {
        self.pc_hits.get(addr).and_then(|m| m.get(&pc)).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("execution exceeded {limit} instructions")]
    StepLimitExceeded { limit: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct Evm {
    config: EvmConfig,
}

impl Evm {
    pub fn new(config: EvmConfig) -> Self {
        Evm { config }
    }

    pub fn config(&self) -> &EvmConfig {
        &self.config
    }

    fn schedule(&self) -> GasSchedule {
        GasSchedule::for_fork(self.config.fork)
    }

    /// Apply `tx` to a copy of `world`. A step-limit hit under gas
    /// accounting reports as out of gas.
    pub fn execute(&self, world: &WorldState, tx: &TxEnv) -> (WorldState, Receipt) {
        let schedule = self.schedule();
        let (world, receipt, _) = interp::transact(&self.config, &schedule, world, tx);
        (world, receipt)
    }

    /// As [`Evm::execute`] with gas accounting disabled; gas is still
    /// measured.
    pub fn execute_with_unlimited_gas(
        &self,
        world: &WorldState,
        tx: &TxEnv,
    ) -> Result<(WorldState, Receipt), ExecError> {
        let schedule = self.schedule();
        let tx = TxEnv {
            gas_accounting_enabled: false,
            ..tx.clone()
        };
        let (world, receipt, hit_limit) = interp::transact(&self.config, &schedule, world, &tx);
        if hit_limit {
            return Err(ExecError::StepLimitExceeded {
                limit: self.config.step_limit,
            });
        }
        Ok((world, receipt))
    }
}

pub fn execute(world: &WorldState, tx: &TxEnv) -> (WorldState, Receipt) {
    Evm::default().execute(world, tx)
}

pub fn execute_with_unlimited_gas(
    world: &WorldState,
    tx: &TxEnv,
) -> Result<(WorldState, Receipt), ExecError> {
    Evm::default().execute_with_unlimited_gas(world, tx)
}

/// `CREATE` address: last 20 bytes of keccak(rlp([sender, nonce])).
pub fn create_address(sender: &Address, nonce: u64) -> Address {
    let mut nonce_rlp = Vec::new();
    if nonce == 0 {
        nonce_rlp.push(0x80);
    } else if nonce < 0x80 {
        nonce_rlp.push(nonce as u8);
    } else {
        let bytes = nonce.to_be_bytes();
        let first = bytes.iter().position(|b| *b != 0).unwrap_or(7);
        nonce_rlp.push(0x80 + (8 - first) as u8);
        nonce_rlp.extend_from_slice(&bytes[first..]);
    }
    let mut payload = vec![0x94];
    payload.extend_from_slice(sender.as_bytes());
    payload.extend_from_slice(&nonce_rlp);
    let mut rlp = vec![0xc0 + payload.len() as u8];
    rlp.extend_from_slice(&payload);
    Address::from_slice(&keccak256(&rlp).as_bytes()[12..])
}

pub fn address_to_word(addr: &Address) -> U256 {
    U256::from_big_endian(addr.as_bytes())
}

pub fn word_to_address(word: U256) -> Address {
    let mut buf = [0u8; 32];
    word.to_big_endian(&mut buf);
    Address::from_slice(&buf[12..])
}
