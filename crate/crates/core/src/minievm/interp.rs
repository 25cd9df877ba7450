use super::state::{Account, Address, TxEnv, WorldState};
use super::trace::{EventKind, EventParams, TraceEvent};
use super::{
    address_to_word, create_address, word_to_address, EvmConfig, FailureSite, HaltReason,
    Receipt, Status,
};
use crate::asm::{jumpdest_analysis, JumpdestSet};
use crate::gas::GasSchedule;
use crate::hash::keccak256;
use crate::opcode::Opcode;
use primitive_types::{U256, U512};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

const STACK_LIMIT: usize = 1024;
const CALL_DEPTH_LIMIT: usize = 1024;
const UNLIMITED_GAS: u64 = 1 << 62;
const IDENTITY_PRECOMPILE: u64 = 4;

const G_SSTORE_SET: u64 = 20000;
const G_SSTORE_RESET: u64 = 5000;
const G_CALL_VALUE: u64 = 9000;
const G_NEW_ACCOUNT: u64 = 25000;
const G_CALL_STIPEND: u64 = 2300;
const G_COPY_WORD: u64 = 3;
const G_SHA3_WORD: u64 = 6;
const G_LOG_BYTE: u64 = 8;
const G_EXP_BYTE: u64 = 50;
const G_CODE_DEPOSIT: u64 = 200;

struct Message {
    caller: Address,
    context: Address,
    code_address: Address,
    code: Arc<Vec<u8>>,
    value: U256,
    data: Vec<u8>,
    gas: u64,
    is_static: bool,
    depth: usize,
    /// Value moved before the code runs (CALL and CREATE only).
    transfer: Option<(Address, Address, U256)>,
    is_create: bool,
}

enum Outcome {
    Success,
    Revert,
    Halt(HaltReason),
}

struct FrameResult {
    outcome: Outcome,
    /// Gas drawn from the frame's allowance.
    gas_used: u64,
    output: Vec<u8>,
}

enum Flow {
    Next,
    Jump(usize),
    Stop,
    Return(Vec<u8>),
    Revert(Vec<u8>),
}

struct Frame {
    pc: usize,
    stack: Vec<U256>,
    memory: Vec<u8>,
    gas_limit: u64,
    gas_used: u64,
    return_data: Vec<u8>,
    jumpdests: JumpdestSet,
    max_pc: usize,
}

impl Frame {
    fn pop(&mut self) -> Result<U256, HaltReason> {
        self.stack.pop().ok_or(HaltReason::StackUnderflow)
    }

    fn push(&mut self, v: U256) -> Result<(), HaltReason> {
        if self.stack.len() >= STACK_LIMIT {
            return Err(HaltReason::StackOverflow);
        }
        self.stack.push(v);
        Ok(())
    }

    fn push_bool(&mut self, b: bool) -> Result<(), HaltReason> {
        self.push(if b { U256::one() } else { U256::zero() })
    }

    fn remaining(&self) -> u64 {
        self.gas_limit.saturating_sub(self.gas_used)
    }
}

struct Machine<'a> {
    cfg: &'a EvmConfig,
    schedule: &'a GasSchedule,
    world: WorldState,
    trace: Vec<TraceEvent>,
    failures: Vec<FailureSite>,
    max_pc: BTreeMap<Address, usize>,
    pc_hits: BTreeMap<Address, BTreeMap<usize, u64>>,
    destructed: BTreeSet<Address>,
    steps: u64,
    step_limit_hit: bool,
    accounting: bool,
    origin: Address,
}

/// Run one transaction. The flag reports a step-limit stop.
pub(super) fn transact(
    cfg: &EvmConfig,
    schedule: &GasSchedule,
    world: &WorldState,
    tx: &TxEnv,
) -> (WorldState, Receipt, bool) {
    let empty_receipt = |status, halt| Receipt {
        status,
        halt,
        gas_used: 0,
        return_data: Vec::new(),
        trace: Vec::new(),
        failures: Vec::new(),
        max_pc: BTreeMap::new(),
        pc_hits: BTreeMap::new(),
        created: None,
        steps: 0,
    };
    if tx.gas_accounting_enabled && tx.gas_limit == 0 {
        return (
            world.clone(),
            empty_receipt(Status::OutOfGas, Some(HaltReason::OutOfGas)),
            false,
        );
    }
    if world.balance(&tx.sender) < tx.value {
        return (
            world.clone(),
            empty_receipt(Status::Revert, Some(HaltReason::InsufficientBalance)),
            false,
        );
    }

    let mut m = Machine {
        cfg,
        schedule,
        world: world.clone(),
        trace: Vec::new(),
        failures: Vec::new(),
        max_pc: BTreeMap::new(),
        pc_hits: BTreeMap::new(),
        destructed: BTreeSet::new(),
        steps: 0,
        step_limit_hit: false,
        accounting: tx.gas_accounting_enabled,
        origin: tx.sender,
    };
    let nonce = m.world.account(&tx.sender).map_or(0, |a| a.nonce);
    m.world.account_mut(tx.sender).nonce = nonce + 1;
    let gas = if tx.gas_accounting_enabled {
        tx.gas_limit
    } else {
        UNLIMITED_GAS
    };

    let (result, created) = match tx.recipient {
        Some(to) => {
            let msg = Message {
                caller: tx.sender,
                context: to,
                code_address: to,
                code: m.world.code(&to),
                value: tx.value,
                data: tx.data.clone(),
                gas,
                is_static: false,
                depth: 0,
                transfer: Some((tx.sender, to, tx.value)),
                is_create: false,
            };
            (m.call_or_precompile(msg), None)
        }
        None => {
            let addr = create_address(&tx.sender, nonce);
            let msg = Message {
                caller: tx.sender,
                context: addr,
                code_address: addr,
                code: Arc::new(tx.data.clone()),
                value: tx.value,
                data: Vec::new(),
                gas,
                is_static: false,
                depth: 0,
                transfer: Some((tx.sender, addr, tx.value)),
                is_create: true,
            };
            let r = m.run_frame(msg);
            let created = matches!(r.outcome, Outcome::Success).then_some(addr);
            (r, created)
        }
    };

    let (status, halt) = match result.outcome {
        Outcome::Success => (Status::Success, None),
        Outcome::Revert => (Status::Revert, Some(HaltReason::Revert)),
        Outcome::Halt(reason) => (reason.status(), Some(reason)),
    };
    for addr in std::mem::take(&mut m.destructed) {
        m.world.accounts.remove(&addr);
    }
    let receipt = Receipt {
        status,
        halt,
        gas_used: result.gas_used,
        return_data: result.output,
        trace: m.trace,
        failures: m.failures,
        max_pc: m.max_pc,
        pc_hits: m.pc_hits,
        created,
        steps: m.steps,
    };
    (m.world, receipt, m.step_limit_hit)
}

fn mem_cost(words: u64) -> u64 {
    3 * words + words * words / 512
}

fn words(len: usize) -> u64 {
    (len as u64).div_ceil(32)
}

fn is_neg(x: U256) -> bool {
    x.bit(255)
}

fn neg(x: U256) -> U256 {
    (!x).overflowing_add(U256::one()).0
}

fn abs(x: U256) -> U256 {
    if is_neg(x) {
        neg(x)
    } else {
        x
    }
}

fn to_usize(v: U256) -> Option<usize> {
    (v <= U256::from(u32::MAX)).then(|| v.as_usize())
}

/// `len` bytes of `src` from `offset`, zero-padded past the end.
fn copy_padded(src: &[u8], offset: U256, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    if let Some(off) = to_usize(offset) {
        if off < src.len() {
            let n = len.min(src.len() - off);
            out[..n].copy_from_slice(&src[off..off + n]);
        }
    }
    out
}

impl Machine<'_> {
    fn charge(&self, f: &mut Frame, amount: u64) -> Result<(), HaltReason> {
        f.gas_used = f.gas_used.saturating_add(amount);
        if self.accounting && f.gas_used > f.gas_limit {
            f.gas_used = f.gas_limit;
            return Err(HaltReason::OutOfGas);
        }
        Ok(())
    }

    /// Grow memory to cover `[offset, offset + len)` and charge for it.
    fn expand(&self, f: &mut Frame, offset: U256, len: U256) -> Result<(usize, usize), HaltReason> {
        if len.is_zero() {
            return Ok((0, 0));
        }
        let limit = self.cfg.max_memory;
        let (off, n) = match (to_usize(offset), to_usize(len)) {
            (Some(o), Some(n)) if o.saturating_add(n) <= limit => (o, n),
            _ => return Err(self.oversized()),
        };
        let end = off + n;
        let new_words = words(end);
        let old_words = words(f.memory.len());
        if new_words > old_words {
            self.charge(f, mem_cost(new_words) - mem_cost(old_words))?;
            f.memory.resize(new_words as usize * 32, 0);
        }
        Ok((off, n))
    }

    fn oversized(&self) -> HaltReason {
        if self.accounting {
            HaltReason::OutOfGas
        } else {
            HaltReason::MemoryLimit
        }
    }

    fn call_or_precompile(&mut self, msg: Message) -> FrameResult {
        if msg.code_address == Address::from_low_u64_be(IDENTITY_PRECOMPILE) {
            return self.identity_precompile(msg);
        }
        self.run_frame(msg)
    }

    fn identity_precompile(&mut self, msg: Message) -> FrameResult {
        let cost = 15 + 3 * words(msg.data.len());
        if self.accounting && cost > msg.gas {
            return FrameResult {
                outcome: Outcome::Halt(HaltReason::OutOfGas),
                gas_used: msg.gas,
                output: Vec::new(),
            };
        }
        if let Some((from, to, value)) = msg.transfer {
            self.world.transfer(from, to, value);
        }
        FrameResult {
            outcome: Outcome::Success,
            gas_used: cost,
            output: msg.data,
        }
    }

    /// Execute a frame with its own rollback point.
    fn run_frame(&mut self, msg: Message) -> FrameResult {
        let world_snapshot = self.world.clone();
        let destructed_snapshot = self.destructed.clone();
        let trace_mark = self.trace.len();

        let (outcome, gas_used, output, pc) = self.enter(&msg);

        if !matches!(outcome, Outcome::Success) {
            self.world = world_snapshot;
            self.destructed = destructed_snapshot;
            self.trace.truncate(trace_mark);
            let reason = match outcome {
                Outcome::Halt(r) => r,
                _ => HaltReason::Revert,
            };
            self.failures.push(FailureSite {
                code_address: msg.code_address,
                context: msg.context,
                pc,
                depth: msg.depth,
                reason,
            });
        }
        FrameResult {
            outcome,
            gas_used,
            output,
        }
    }

    fn enter(&mut self, msg: &Message) -> (Outcome, u64, Vec<u8>, usize) {
        if msg.is_create {
            if let Some(existing) = self.world.account(&msg.context) {
                if existing.nonce > 0 || !existing.code.is_empty() {
                    return (
                        Outcome::Halt(HaltReason::CreateCollision),
                        self.all_gas(msg.gas, 0),
                        Vec::new(),
                        0,
                    );
                }
            }
            self.world.account_mut(msg.context).nonce = 1;
        }
        if let Some((from, to, value)) = msg.transfer {
            if !self.world.transfer(from, to, value) {
                return (
                    Outcome::Halt(HaltReason::InsufficientBalance),
                    0,
                    Vec::new(),
                    0,
                );
            }
        }

        let mut f = Frame {
            pc: 0,
            stack: Vec::with_capacity(32),
            memory: Vec::new(),
            gas_limit: msg.gas,
            gas_used: 0,
            return_data: Vec::new(),
            jumpdests: jumpdest_analysis(&msg.code),
            max_pc: 0,
        };
        let result = self.interpret(msg, &mut f);
        let entry = self.max_pc.entry(msg.code_address).or_insert(0);
        *entry = (*entry).max(f.max_pc);

        match result {
            Ok(Flow::Return(output)) if msg.is_create => {
                if output.len() > self.cfg.max_code_size {
                    let used = self.all_gas(msg.gas, f.gas_used);
                    return (Outcome::Halt(HaltReason::CodeSizeLimit), used, Vec::new(), f.pc);
                }
                let deposit = G_CODE_DEPOSIT * output.len() as u64;
                if let Err(reason) = self.charge(&mut f, deposit) {
                    let used = self.all_gas(msg.gas, f.gas_used);
                    return (Outcome::Halt(reason), used, Vec::new(), f.pc);
                }
                self.world.set_code(msg.context, output);
                (Outcome::Success, f.gas_used, Vec::new(), f.pc)
            }
            Ok(Flow::Return(output)) => (Outcome::Success, f.gas_used, output, f.pc),
            Ok(Flow::Stop) => (Outcome::Success, f.gas_used, Vec::new(), f.pc),
            Ok(Flow::Revert(output)) => (Outcome::Revert, f.gas_used, output, f.pc),
            Ok(Flow::Next | Flow::Jump(_)) => unreachable!("interpret only returns exits"),
            Err(reason) => {
                let used = self.all_gas(msg.gas, f.gas_used);
                (Outcome::Halt(reason), used, Vec::new(), f.pc)
            }
        }
    }

    /// Exceptional halts consume the whole allowance; without accounting
    /// the measured figure is kept instead.
    fn all_gas(&self, limit: u64, used: u64) -> u64 {
        if self.accounting {
            limit
        } else {
            used
        }
    }

    fn interpret(&mut self, msg: &Message, f: &mut Frame) -> Result<Flow, HaltReason> {
        let code = msg.code.clone();
        loop {
            if f.pc >= code.len() {
                return Ok(Flow::Stop);
            }
            self.steps += 1;
            if self.steps > self.cfg.step_limit {
                self.step_limit_hit = true;
                return Err(HaltReason::StepLimit);
            }
            let op = Opcode(code[f.pc]);
            f.max_pc = f.max_pc.max(f.pc);
            if self.cfg.coverage {
                *self
                    .pc_hits
                    .entry(msg.code_address)
                    .or_default()
                    .entry(f.pc)
                    .or_insert(0) += 1;
            }
            let base = self
                .schedule
                .static_gas(op)
                .map_err(|_| HaltReason::InvalidOpcode(op.0))?;
            self.charge(f, base)?;

            match self.step(msg, f, op, &code)? {
                Flow::Next => f.pc += 1 + op.immediate_len(),
                Flow::Jump(dest) => f.pc = dest,
                exit => return Ok(exit),
            }
        }
    }

    fn step(
        &mut self,
        msg: &Message,
        f: &mut Frame,
        op: Opcode,
        code: &[u8],
    ) -> Result<Flow, HaltReason> {
        macro_rules! binop {
            ($body:expr) => {{
                let a = f.pop()?;
                let b = f.pop()?;
                #[allow(clippy::redundant_closure_call)]
                f.push(($body)(a, b))?;
            }};
        }
        macro_rules! cmp {
            ($body:expr) => {{
                let a = f.pop()?;
                let b = f.pop()?;
                #[allow(clippy::redundant_closure_call)]
                f.push_bool(($body)(a, b))?;
            }};
        }

        match op {
            Opcode::STOP => return Ok(Flow::Stop),
            Opcode::ADD => binop!(|a: U256, b| a.overflowing_add(b).0),
            Opcode::MUL => binop!(|a: U256, b| a.overflowing_mul(b).0),
            Opcode::SUB => binop!(|a: U256, b| a.overflowing_sub(b).0),
            Opcode::DIV => binop!(|a: U256, b: U256| if b.is_zero() { b } else { a / b }),
            Opcode::SDIV => binop!(|a: U256, b: U256| {
                if b.is_zero() {
                    U256::zero()
                } else {
                    let q = abs(a) / abs(b);
                    if is_neg(a) ^ is_neg(b) {
                        neg(q)
                    } else {
                        q
                    }
                }
            }),
            Opcode::MOD => binop!(|a: U256, b: U256| if b.is_zero() { b } else { a % b }),
            Opcode::SMOD => binop!(|a: U256, b: U256| {
                if b.is_zero() {
                    U256::zero()
                } else {
                    let r = abs(a) % abs(b);
                    if is_neg(a) {
                        neg(r)
                    } else {
                        r
                    }
                }
            }),
            Opcode::ADDMOD => {
                let (a, b, n) = (f.pop()?, f.pop()?, f.pop()?);
                let r = if n.is_zero() {
                    U256::zero()
                } else {
                    let sum = U512::from(a) + U512::from(b);
                    U256::try_from(sum % U512::from(n)).expect("remainder fits")
                };
                f.push(r)?;
            }
            Opcode::MULMOD => {
                let (a, b, n) = (f.pop()?, f.pop()?, f.pop()?);
                let r = if n.is_zero() {
                    U256::zero()
                } else {
                    U256::try_from(a.full_mul(b) % U512::from(n)).expect("remainder fits")
                };
                f.push(r)?;
            }
            Opcode::EXP => {
                let (a, b) = (f.pop()?, f.pop()?);
                let byte_len = (b.bits() as u64).div_ceil(8);
                self.charge(f, G_EXP_BYTE * byte_len)?;
                f.push(a.overflowing_pow(b).0)?;
            }
            Opcode::SIGNEXTEND => binop!(|b: U256, x: U256| {
                if b < U256::from(31) {
                    let bit = b.as_usize() * 8 + 7;
                    let low_mask = (U256::one() << (bit + 1)) - 1;
                    if x.bit(bit) {
                        x | !low_mask
                    } else {
                        x & low_mask
                    }
                } else {
                    x
                }
            }),
            Opcode::LT => cmp!(|a, b| a < b),
            Opcode::GT => cmp!(|a, b| a > b),
            Opcode::SLT => cmp!(|a: U256, b: U256| match (is_neg(a), is_neg(b)) {
                (true, false) => true,
                (false, true) => false,
                _ => a < b,
            }),
            Opcode::SGT => cmp!(|a: U256, b: U256| match (is_neg(a), is_neg(b)) {
                (true, false) => false,
                (false, true) => true,
                _ => a > b,
            }),
            Opcode::EQ => cmp!(|a, b| a == b),
            Opcode::ISZERO => {
                let a = f.pop()?;
                f.push_bool(a.is_zero())?;
            }
            Opcode::AND => binop!(|a, b| a & b),
            Opcode::OR => binop!(|a, b| a | b),
            Opcode::XOR => binop!(|a, b| a ^ b),
            Opcode::NOT => {
                let a = f.pop()?;
                f.push(!a)?;
            }
            Opcode::BYTE => binop!(|i: U256, x: U256| {
                if i < U256::from(32) {
                    (x >> (8 * (31 - i.as_usize()))) & U256::from(0xff)
                } else {
                    U256::zero()
                }
            }),
            Opcode::SHL => binop!(|shift: U256, v: U256| {
                if shift >= U256::from(256) {
                    U256::zero()
                } else {
                    v << shift.as_usize()
                }
            }),
            Opcode::SHR => binop!(|shift: U256, v: U256| {
                if shift >= U256::from(256) {
                    U256::zero()
                } else {
                    v >> shift.as_usize()
                }
            }),
            Opcode::SAR => binop!(|shift: U256, v: U256| {
                let negative = is_neg(v);
                if shift >= U256::from(256) {
                    if negative {
                        U256::MAX
                    } else {
                        U256::zero()
                    }
                } else if negative {
                    !((!v) >> shift.as_usize())
                } else {
                    v >> shift.as_usize()
                }
            }),
            Opcode::SHA3 => {
                let (off, len) = (f.pop()?, f.pop()?);
                let (o, n) = self.expand(f, off, len)?;
                self.charge(f, G_SHA3_WORD * words(n))?;
                let h = keccak256(&f.memory[o..o + n]);
                f.push(U256::from_big_endian(h.as_bytes()))?;
            }
            Opcode::ADDRESS => f.push(address_to_word(&msg.context))?,
            Opcode::BALANCE => {
                let a = word_to_address(f.pop()?);
                f.push(self.world.balance(&a))?;
            }
            Opcode::SELFBALANCE => f.push(self.world.balance(&msg.context))?,
            Opcode::ORIGIN => f.push(address_to_word(&self.origin))?,
            Opcode::CALLER => f.push(address_to_word(&msg.caller))?,
            Opcode::CALLVALUE => f.push(msg.value)?,
            Opcode::CALLDATALOAD => {
                let off = f.pop()?;
                let word = copy_padded(&msg.data, off, 32);
                f.push(U256::from_big_endian(&word))?;
            }
            Opcode::CALLDATASIZE => f.push(U256::from(msg.data.len()))?,
            Opcode::CALLDATACOPY | Opcode::CODECOPY => {
                let (mem_off, src_off, len) = (f.pop()?, f.pop()?, f.pop()?);
                let (o, n) = self.expand(f, mem_off, len)?;
                self.charge(f, G_COPY_WORD * words(n))?;
                let src: &[u8] = if op == Opcode::CODECOPY { code } else { &msg.data };
                let bytes = copy_padded(src, src_off, n);
                f.memory[o..o + n].copy_from_slice(&bytes);
            }
            Opcode::CODESIZE => f.push(U256::from(code.len()))?,
            Opcode::GASPRICE => f.push(self.cfg.block.gas_price)?,
            Opcode::EXTCODESIZE => {
                let a = word_to_address(f.pop()?);
                f.push(U256::from(self.world.code(&a).len()))?;
            }
            Opcode::RETURNDATASIZE => f.push(U256::from(f.return_data.len()))?,
            Opcode::RETURNDATACOPY => {
                let (mem_off, src_off, len) = (f.pop()?, f.pop()?, f.pop()?);
                let in_bounds = match (to_usize(src_off), to_usize(len)) {
                    (Some(s), Some(n)) => s + n <= f.return_data.len(),
                    _ => false,
                };
                if !in_bounds {
                    return Err(HaltReason::ReturnDataOutOfBounds);
                }
                let (o, n) = self.expand(f, mem_off, len)?;
                self.charge(f, G_COPY_WORD * words(n))?;
                let s = src_off.as_usize();
                let bytes = f.return_data[s..s + n].to_vec();
                f.memory[o..o + n].copy_from_slice(&bytes);
            }
            Opcode::COINBASE => f.push(address_to_word(&self.cfg.block.coinbase))?,
            Opcode::TIMESTAMP => f.push(U256::from(self.cfg.block.timestamp))?,
            Opcode::NUMBER => f.push(U256::from(self.cfg.block.number))?,
            Opcode::DIFFICULTY => f.push(self.cfg.block.difficulty)?,
            Opcode::GASLIMIT => f.push(U256::from(self.cfg.block.gas_limit))?,
            Opcode::CHAINID => f.push(U256::from(self.cfg.block.chain_id))?,
            Opcode::POP => {
                f.pop()?;
            }
            Opcode::MLOAD => {
                let off = f.pop()?;
                let (o, _) = self.expand(f, off, U256::from(32))?;
                let v = U256::from_big_endian(&f.memory[o..o + 32]);
                f.push(v)?;
            }
            Opcode::MSTORE => {
                let (off, v) = (f.pop()?, f.pop()?);
                let (o, _) = self.expand(f, off, U256::from(32))?;
                v.to_big_endian(&mut f.memory[o..o + 32]);
            }
            Opcode::MSTORE8 => {
                let (off, v) = (f.pop()?, f.pop()?);
                let (o, _) = self.expand(f, off, U256::one())?;
                f.memory[o] = v.low_u32() as u8;
            }
            Opcode::SLOAD => {
                let key = f.pop()?;
                f.push(self.world.sload(&msg.context, &key))?;
            }
            Opcode::SSTORE => {
                if msg.is_static {
                    return Err(HaltReason::StaticViolation);
                }
                let (key, value) = (f.pop()?, f.pop()?);
                let current = self.world.sload(&msg.context, &key);
                let cost = if current.is_zero() && !value.is_zero() {
                    G_SSTORE_SET
                } else {
                    G_SSTORE_RESET
                };
                self.charge(f, cost)?;
                self.world.sstore(msg.context, key, value);
                self.trace.push(TraceEvent {
                    kind: EventKind::Sstore,
                    depth: msg.depth,
                    context: msg.context,
                    params: EventParams::Storage { key, value },
                    success: true,
                    return_data_hash: None,
                });
            }
            Opcode::JUMP => {
                let dest = f.pop()?;
                return self.jump_target(f, dest).map(Flow::Jump);
            }
            Opcode::JUMPI => {
                let (dest, cond) = (f.pop()?, f.pop()?);
                if !cond.is_zero() {
                    return self.jump_target(f, dest).map(Flow::Jump);
                }
            }
            Opcode::PC => f.push(U256::from(f.pc))?,
            Opcode::MSIZE => f.push(U256::from(f.memory.len()))?,
            Opcode::GAS => {
                let left = if self.accounting {
                    f.remaining()
                } else {
                    UNLIMITED_GAS - f.gas_used.min(UNLIMITED_GAS)
                };
                f.push(U256::from(left))?;
            }
            Opcode::JUMPDEST => {}
            op if op.is_push() => {
                let n = op.immediate_len();
                let start = f.pc + 1;
                let mut buf = [0u8; 32];
                let avail = n.min(code.len().saturating_sub(start));
                buf[32 - n..32 - n + avail].copy_from_slice(&code[start..start + avail]);
                f.push(U256::from_big_endian(&buf))?;
            }
            op if (0x80..=0x8f).contains(&op.0) => {
                let depth = (op.0 - 0x7f) as usize;
                if f.stack.len() < depth {
                    return Err(HaltReason::StackUnderflow);
                }
                let v = f.stack[f.stack.len() - depth];
                f.push(v)?;
            }
            op if (0x90..=0x9f).contains(&op.0) => {
                let depth = (op.0 - 0x8f) as usize;
                let len = f.stack.len();
                if len <= depth {
                    return Err(HaltReason::StackUnderflow);
                }
                f.stack.swap(len - 1, len - 1 - depth);
            }
            op if (0xa0..=0xa4).contains(&op.0) => {
                if msg.is_static {
                    return Err(HaltReason::StaticViolation);
                }
                let topics_n = (op.0 - 0xa0) as usize;
                let (off, len) = (f.pop()?, f.pop()?);
                let mut topics = Vec::with_capacity(topics_n);
                for _ in 0..topics_n {
                    let t = f.pop()?;
                    let mut b = [0u8; 32];
                    t.to_big_endian(&mut b);
                    topics.push(b.into());
                }
                let (o, n) = self.expand(f, off, len)?;
                self.charge(f, G_LOG_BYTE * n as u64)?;
                let data_hash = keccak256(&f.memory[o..o + n]);
                self.trace.push(TraceEvent {
                    kind: EventKind::Log,
                    depth: msg.depth,
                    context: msg.context,
                    params: EventParams::Log { topics, data_hash },
                    success: true,
                    return_data_hash: None,
                });
            }
            Opcode::CREATE => return self.op_create(msg, f),
            Opcode::CALL | Opcode::DELEGATECALL | Opcode::STATICCALL => {
                return self.op_call(msg, f, op)
            }
            Opcode::RETURN | Opcode::REVERT => {
                let (off, len) = (f.pop()?, f.pop()?);
                let (o, n) = self.expand(f, off, len)?;
                let out = f.memory[o..o + n].to_vec();
                return Ok(if op == Opcode::RETURN {
                    Flow::Return(out)
                } else {
                    Flow::Revert(out)
                });
            }
            Opcode::INVALID => return Err(HaltReason::InvalidOpcode(op.0)),
            Opcode::SELFDESTRUCT => {
                if msg.is_static {
                    return Err(HaltReason::StaticViolation);
                }
                let beneficiary = word_to_address(f.pop()?);
                let amount = self.world.balance(&msg.context);
                let fresh = self
                    .world
                    .account(&beneficiary)
                    .is_none_or(Account::is_empty);
                if fresh && !amount.is_zero() {
                    self.charge(f, G_NEW_ACCOUNT)?;
                }
                self.world.set_balance(msg.context, U256::zero());
                if beneficiary != msg.context {
                    let b = self.world.account_mut(beneficiary);
                    b.balance = b.balance.saturating_add(amount);
                }
                self.destructed.insert(msg.context);
                self.trace.push(TraceEvent {
                    kind: EventKind::Selfdestruct,
                    depth: msg.depth,
                    context: msg.context,
                    params: EventParams::Selfdestruct {
                        beneficiary,
                        amount,
                    },
                    success: true,
                    return_data_hash: None,
                });
                return Ok(Flow::Stop);
            }
            other => return Err(HaltReason::UnsupportedOpcode(other.0)),
        }
        Ok(Flow::Next)
    }

    fn jump_target(&self, f: &Frame, dest: U256) -> Result<usize, HaltReason> {
        match to_usize(dest) {
            Some(d) if f.jumpdests.contains(d) => Ok(d),
            _ => Err(HaltReason::BadJumpDestination),
        }
    }

    /// All but one 64th of what is left, capped at `requested`.
    fn forwardable(&self, f: &Frame, requested: U256) -> u64 {
        let available = f.remaining();
        let cap = available - available / 64;
        if requested > U256::from(cap) {
            cap
        } else {
            requested.as_u64()
        }
    }

    fn op_call(&mut self, msg: &Message, f: &mut Frame, op: Opcode) -> Result<Flow, HaltReason> {
        let gas_req = f.pop()?;
        let target = word_to_address(f.pop()?);
        let value = if op == Opcode::CALL {
            f.pop()?
        } else {
            U256::zero()
        };
        let (in_off, in_len, out_off, out_len) = (f.pop()?, f.pop()?, f.pop()?, f.pop()?);
        if op == Opcode::CALL && msg.is_static && !value.is_zero() {
            return Err(HaltReason::StaticViolation);
        }
        let (io, in_n) = self.expand(f, in_off, in_len)?;
        let (oo, out_n) = self.expand(f, out_off, out_len)?;

        let mut extra = 0;
        if !value.is_zero() {
            extra += G_CALL_VALUE;
            if self.world.account(&target).is_none_or(Account::is_empty) {
                extra += G_NEW_ACCOUNT;
            }
        }
        self.charge(f, extra)?;
        let forwarded = self.forwardable(f, gas_req);
        self.charge(f, forwarded)?;
        let stipend = if value.is_zero() { 0 } else { G_CALL_STIPEND };
        let input = f.memory[io..io + in_n].to_vec();

        let kind = match op {
            Opcode::CALL => EventKind::Call,
            Opcode::DELEGATECALL => EventKind::Delegatecall,
            _ => EventKind::Staticcall,
        };
        let event_index = self.trace.len();
        self.trace.push(TraceEvent {
            kind,
            depth: msg.depth,
            context: msg.context,
            params: EventParams::Call {
                target,
                value,
                calldata_hash: keccak256(&input),
            },
            success: false,
            return_data_hash: None,
        });

        let too_deep = msg.depth + 1 > CALL_DEPTH_LIMIT;
        let broke = op == Opcode::CALL && self.world.balance(&msg.context) < value;
        if too_deep || broke {
            f.gas_used -= forwarded;
            f.return_data.clear();
            f.push(U256::zero())?;
            return Ok(Flow::Next);
        }

        let child = match op {
            Opcode::CALL => Message {
                caller: msg.context,
                context: target,
                code_address: target,
                code: self.world.code(&target),
                value,
                data: input,
                gas: forwarded + stipend,
                is_static: msg.is_static,
                depth: msg.depth + 1,
                transfer: Some((msg.context, target, value)),
                is_create: false,
            },
            Opcode::DELEGATECALL => Message {
                caller: msg.caller,
                context: msg.context,
                code_address: target,
                code: self.world.code(&target),
                value: msg.value,
                data: input,
                gas: forwarded,
                is_static: msg.is_static,
                depth: msg.depth + 1,
                transfer: None,
                is_create: false,
            },
            _ => Message {
                caller: msg.context,
                context: target,
                code_address: target,
                code: self.world.code(&target),
                value: U256::zero(),
                data: input,
                gas: forwarded,
                is_static: true,
                depth: msg.depth + 1,
                transfer: None,
                is_create: false,
            },
        };
        let allowance = child.gas;
        let result = self.call_or_precompile(child);
        let left = allowance.saturating_sub(result.gas_used);
        f.gas_used = f.gas_used.saturating_sub(left);

        let ok = matches!(result.outcome, Outcome::Success);
        let n = out_n.min(result.output.len());
        f.memory[oo..oo + n].copy_from_slice(&result.output[..n]);
        let event = &mut self.trace[event_index];
        event.success = ok;
        event.return_data_hash = Some(keccak256(&result.output));
        f.return_data = result.output;
        f.push_bool(ok)?;
        Ok(Flow::Next)
    }

    fn op_create(&mut self, msg: &Message, f: &mut Frame) -> Result<Flow, HaltReason> {
        if msg.is_static {
            return Err(HaltReason::StaticViolation);
        }
        let (value, off, len) = (f.pop()?, f.pop()?, f.pop()?);
        let (o, n) = self.expand(f, off, len)?;
        let init = f.memory[o..o + n].to_vec();
        f.return_data.clear();

        let nonce = self.world.account(&msg.context).map_or(0, |a| a.nonce);
        let addr = create_address(&msg.context, nonce);
        let event_index = self.trace.len();
        self.trace.push(TraceEvent {
            kind: EventKind::Create,
            depth: msg.depth,
            context: msg.context,
            params: EventParams::Create {
                value,
                init_code_hash: keccak256(&init),
                created: None,
            },
            success: false,
            return_data_hash: None,
        });
        if msg.depth + 1 > CALL_DEPTH_LIMIT || self.world.balance(&msg.context) < value {
            f.push(U256::zero())?;
            return Ok(Flow::Next);
        }
        self.world.account_mut(msg.context).nonce = nonce + 1;

        let forwarded = self.forwardable(f, U256::MAX);
        self.charge(f, forwarded)?;
        let child = Message {
            caller: msg.context,
            context: addr,
            code_address: addr,
            code: Arc::new(init),
            value,
            data: Vec::new(),
            gas: forwarded,
            is_static: false,
            depth: msg.depth + 1,
            transfer: Some((msg.context, addr, value)),
            is_create: true,
        };
        let result = self.run_frame(child);
        f.gas_used = f
            .gas_used
            .saturating_sub(forwarded.saturating_sub(result.gas_used));
        let ok = matches!(result.outcome, Outcome::Success);
        if let EventParams::Create { created, .. } = &mut self.trace[event_index].params {
            *created = ok.then_some(addr);
        }
        self.trace[event_index].success = ok;
        if matches!(result.outcome, Outcome::Revert) {
            f.return_data = result.output;
        }
        f.push(if ok { address_to_word(&addr) } else { U256::zero() })?;
        Ok(Flow::Next)
    }
}
