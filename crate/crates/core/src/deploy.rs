//! Delegatecall proxy generation and deployment planning.
//!
//! The proxy keeps the owner and the current logic address in two
//! hash-derived slots, so the logic contract's own storage layout (slots
//! allocated from 0 upwards) never touches them.

use crate::asm::MAX_CODE_SIZE;
use crate::builder::{assemble_items, AsmItem, Assembler};
use crate::hash::{keccak256, Selector};
use crate::minievm::{address_to_word, create_address, Address, Transaction};
use crate::opcode::Opcode;
use primitive_types::U256;
use serde::{Deserialize, Serialize};

pub const UPGRADE_SIGNATURE: &str = "upgradeTo(address)";
pub const IMPLEMENTATION_LABEL: &str = "eip1967.proxy.implementation";
pub const OWNER_LABEL: &str = "eip1967.proxy.admin";

/// Gas limit given to planned transactions.
pub const PLAN_GAS: u64 = 8_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeployError {
    #[error("code is {size} bytes, over the {cap} byte cap")]
    CodeSizeCapExceeded { size: usize, cap: usize },
    #[error("implementation and owner slots must differ")]
    SlotCollision,
}

/// `keccak256(label) - 1`.
pub fn derived_slot(label: &str) -> U256 {
    U256::from_big_endian(keccak256(label.as_bytes()).as_bytes()) - U256::one()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub owner: Address,
    #[serde(with = "crate::json::word")]
    pub implementation_slot: U256,
    #[serde(with = "crate::json::word")]
    pub owner_slot: U256,
}

impl ProxyConfig {
    pub fn new(owner: Address) -> Self {
        ProxyConfig {
            owner,
            implementation_slot: derived_slot(IMPLEMENTATION_LABEL),
            owner_slot: derived_slot(OWNER_LABEL),
        }
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        if self.implementation_slot == self.owner_slot {
            return Err(DeployError::SlotCollision);
        }
        Ok(())
    }
}

pub fn upgrade_selector() -> Selector {
    Selector::from_signature(UPGRADE_SIGNATURE)
}

fn push_word(a: &mut Assembler, value: U256) {
    a.push(value);
}

/// Runtime code of the proxy.
///
/// `upgradeTo(address)` from the owner stores the new implementation; from
/// anyone else it reverts. Every other call is forwarded by DELEGATECALL
/// with the calldata unchanged, and the callee's return or revert data is
/// passed back verbatim.
pub fn make_proxy(config: &ProxyConfig) -> Vec<u8> {
    use Opcode as O;
    let mut a = Assembler::new();
    // Calls shorter than a selector are forwarded too.
    a.op(O::CALLDATASIZE).push(4u8).op(O::GT).jumpi("forward");
    a.push(0u8).op(O::CALLDATALOAD).push(0xe0u8).op(O::SHR);
    a.push(upgrade_selector().as_u32()).op(O::EQ).jumpi("upgrade");

    a.label("forward");
    a.op(O::CALLDATASIZE).push(0u8).op(O::DUP1).op(O::CALLDATACOPY);
    a.push(0u8).op(O::DUP1).op(O::CALLDATASIZE).push(0u8);
    push_word(&mut a, config.implementation_slot);
    a.op(O::SLOAD).op(O::GAS).op(O::DELEGATECALL);
    a.op(O::RETURNDATASIZE).push(0u8).op(O::DUP1).op(O::RETURNDATACOPY);
    a.jumpi("ok");
    a.op(O::RETURNDATASIZE).push(0u8).op(O::REVERT);
    a.label("ok");
    a.op(O::RETURNDATASIZE).push(0u8).op(O::RETURN);

    a.label("upgrade");
    push_word(&mut a, config.owner_slot);
    a.op(O::SLOAD).op(O::CALLER).op(O::EQ).jumpi("authorized");
    a.revert_empty();
    a.label("authorized");
    a.push(4u8).op(O::CALLDATALOAD);
    push_word(&mut a, config.implementation_slot);
    a.op(O::SSTORE).op(O::STOP);
    a.build().expect("proxy labels are defined").code
}

/// Init code that runs `setup` and then returns `runtime`.
fn init_code(setup: Vec<AsmItem>, runtime: &[u8]) -> Vec<u8> {
    // The runtime offset depends on the setup length; a fixed PUSH2 keeps
    // this a single pass.
    let mut items = setup;
    items.extend([
        AsmItem::Push((runtime.len() as u16).to_be_bytes().to_vec()),
        AsmItem::Op(Opcode::DUP1),
        AsmItem::PushLabelWide("runtime".into(), 2),
        AsmItem::push_value(0u8),
        AsmItem::Op(Opcode::CODECOPY),
        AsmItem::push_value(0u8),
        AsmItem::Op(Opcode::RETURN),
        AsmItem::Mark("runtime".into()),
        AsmItem::Raw(runtime.to_vec()),
    ]);
    assemble_items(&items, 0).expect("init labels are defined").code
}

/// Creation code that deploys `runtime` as is.
pub fn creation_code(runtime: &[u8]) -> Vec<u8> {
    init_code(Vec::new(), runtime)
}

/// Creation code for the proxy, storing owner and first implementation.
pub fn proxy_creation_code(config: &ProxyConfig, logic: Address) -> Vec<u8> {
    let setup = vec![
        AsmItem::push_value(address_to_word(&config.owner)),
        AsmItem::push_value(config.owner_slot),
        AsmItem::Op(Opcode::SSTORE),
        AsmItem::push_value(address_to_word(&logic)),
        AsmItem::push_value(config.implementation_slot),
        AsmItem::Op(Opcode::SSTORE),
    ];
    init_code(setup, &make_proxy(config))
}

/// The logic contract is the runtime code unchanged. Constructors never
/// run in proxy storage, so contracts behind the proxy need an explicit,
/// guarded init function.
pub fn to_logic_contract(code: &[u8]) -> Result<Vec<u8>, DeployError> {
    if code.len() > MAX_CODE_SIZE {
        return Err(DeployError::CodeSizeCapExceeded {
            size: code.len(),
            cap: MAX_CODE_SIZE,
        });
    }
    Ok(code.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_byte: u64,
    /// CREATE base plus transaction base.
    pub fixed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            per_byte: 200,
            fixed: 32_000 + 21_000,
        }
    }
}

impl CostModel {
    pub fn estimate(&self, code_len: usize) -> u64 {
        self.per_byte * code_len as u64 + self.fixed
    }

    /// Cost attributable to `extra` bytes alone.
    pub fn marginal(&self, extra: usize) -> u64 {
        self.per_byte * extra as u64
    }
}

pub fn estimate_deploy_cost(code: &[u8]) -> u64 {
    CostModel::default().estimate(code.len())
}

/// `upgradeTo(new_logic)` calldata.
pub fn upgrade_calldata(new_logic: Address) -> Vec<u8> {
    let mut data = upgrade_selector().0.to_vec();
    data.extend_from_slice(&[0u8; 12]);
    data.extend_from_slice(new_logic.as_bytes());
    data
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpgradePlan {
    #[serde(with = "crate::json::bytes")]
    pub new_logic_code: Vec<u8>,
    pub new_logic: Address,
    /// Deploys the new logic, then switches the proxy over.
    pub transactions: Vec<Transaction>,
}

impl UpgradePlan {
    pub fn switchover(&self) -> &Transaction {
        self.transactions.last().expect("a plan ends with the switchover")
    }
}

/// Plan an upgrade of `proxy` to `new_logic_code`, sent by `owner` whose
/// next nonce is `owner_nonce`.
pub fn encode_upgrade(
    proxy: Address,
    owner: Address,
    owner_nonce: u64,
    new_logic_code: &[u8],
) -> Result<UpgradePlan, DeployError> {
    let code = to_logic_contract(new_logic_code)?;
    let new_logic = create_address(&owner, owner_nonce);
    let deploy = Transaction {
        id: Some("deploy-logic".into()),
        from: owner,
        to: None,
        data: creation_code(&code),
        value: U256::zero(),
        gas: PLAN_GAS,
    };
    let switch = Transaction::call(owner, proxy, upgrade_calldata(new_logic), 100_000).with_id("switchover");
    Ok(UpgradePlan {
        new_logic_code: code,
        new_logic,
        transactions: vec![deploy, switch],
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentBundle {
    pub config: ProxyConfig,
    #[serde(with = "crate::json::bytes")]
    pub proxy_code: Vec<u8>,
    #[serde(with = "crate::json::bytes")]
    pub logic_code: Vec<u8>,
    pub logic: Address,
    pub proxy: Address,
    /// Logic creation, then proxy creation, both from the owner.
    pub transactions: Vec<Transaction>,
    pub cost_estimate: u64,
}

/// Deploy `logic_runtime` behind a fresh proxy. The owner sends both
/// creations, starting at nonce `owner_nonce`.
pub fn bundle(logic_runtime: &[u8], owner: Address, owner_nonce: u64) -> Result<DeploymentBundle, DeployError> {
    let config = ProxyConfig::new(owner);
    config.validate()?;
    let logic_code = to_logic_contract(logic_runtime)?;
    let logic = create_address(&owner, owner_nonce);
    let proxy = create_address(&owner, owner_nonce + 1);
    let proxy_code = make_proxy(&config);
    let create = |id: &str, data: Vec<u8>| Transaction {
        id: Some(id.into()),
        from: owner,
        to: None,
        data,
        value: U256::zero(),
        gas: PLAN_GAS,
    };
    let transactions = vec![
        create("deploy-logic", creation_code(&logic_code)),
        create("deploy-proxy", proxy_creation_code(&config, logic)),
    ];
    let cost_estimate = estimate_deploy_cost(&logic_code) + estimate_deploy_cost(&proxy_code);
    Ok(DeploymentBundle {
        config,
        proxy_code,
        logic_code,
        logic,
        proxy,
        transactions,
        cost_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minievm::{execute, WorldState};
    use primitive_types::H160;

    #[test]
    fn slot_vectors() {
        assert_eq!(
            format!("{:#x}", derived_slot(IMPLEMENTATION_LABEL)),
            "0x360894a13ba1a3210667c828492db98dca3e2076cc3735a920a3ca505d382bbc"
        );
        assert_eq!(
            format!("{:#x}", derived_slot(OWNER_LABEL)),
            "0xb53127684a568b3173ae13b9f8a6016e243e63b6e8ee1178d6a717850b5d6103"
        );
        assert_eq!(upgrade_selector().to_string(), "0x3659cfe6");
    }

    #[test]
    fn cost_figures() {
        let m = CostModel::default();
        assert_eq!(estimate_deploy_cost(&[]), 53_000);
        assert_eq!(m.marginal(999), 199_800);
        assert_eq!(m.marginal(1299), 259_800);
        assert_eq!(m.estimate(10) - m.estimate(9), 200);
    }

    #[test]
    fn calldata_layout() {
        let data = upgrade_calldata(H160::repeat_byte(0xaa));
        assert_eq!(data.len(), 36);
        assert_eq!(&data[..4], &[0x36, 0x59, 0xcf, 0xe6]);
        assert_eq!(&data[4..16], &[0; 12]);
    }

    #[test]
    fn creation_returns_runtime() {
        let runtime = vec![0x60, 0x01, 0x00];
        let sender = H160::repeat_byte(1);
        let tx = Transaction {
            id: None,
            from: sender,
            to: None,
            data: creation_code(&runtime),
            value: U256::zero(),
            gas: PLAN_GAS,
        };
        let (world, r) = execute(&WorldState::default(), &tx.env());
        assert!(r.is_success());
        let addr = r.created.unwrap();
        assert_eq!(addr, create_address(&sender, 0));
        assert_eq!(*world.code(&addr), runtime);
    }

    #[test]
    fn oversized_logic() {
        assert!(matches!(
            to_logic_contract(&vec![0; MAX_CODE_SIZE + 1]),
            Err(DeployError::CodeSizeCapExceeded { .. })
        ));
        assert_eq!(to_logic_contract(&[1, 2, 3]).unwrap(), vec![1, 2, 3]);
    }
}
