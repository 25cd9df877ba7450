use crate::json;
use primitive_types::{H160, U256};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

pub type Address = H160;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    #[serde(default, with = "json::word")]
    pub balance: U256,
    #[serde(default, with = "json::uint")]
    pub nonce: u64,
    #[serde(default, with = "code_serde")]
    pub code: Arc<Vec<u8>>,
    #[serde(default, with = "json::word_map")]
    pub storage: BTreeMap<U256, U256>,
}

mod code_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Arc<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        json::bytes::serialize(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Arc<Vec<u8>>, D::Error> {
        json::bytes::deserialize(d).map(Arc::new)
    }
}

impl Account {
    pub fn with_code(code: Vec<u8>) -> Self {
        Account {
            code: Arc::new(code),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.balance.is_zero() && self.nonce == 0 && self.code.is_empty()
    }
}

/// All accounts. Storage never holds zero values, so a zero write and an
/// absent key are the same state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    #[serde(default)]
    pub accounts: BTreeMap<Address, Account>,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn account(&self, addr: &Address) -> Option<&Account> {
        self.accounts.get(addr)
    }

    pub fn account_mut(&mut self, addr: Address) -> &mut Account {
        self.accounts.entry(addr).or_default()
    }

    pub fn exists(&self, addr: &Address) -> bool {
        self.accounts.contains_key(addr)
    }

    pub fn insert(&mut self, addr: Address, account: Account) -> &mut Self {
        self.accounts.insert(addr, account);
        self
    }

    pub fn code(&self, addr: &Address) -> Arc<Vec<u8>> {
        self.accounts
            .get(addr)
            .map(|a| a.code.clone())
            .unwrap_or_default()
    }

    pub fn set_code(&mut self, addr: Address, code: Vec<u8>) {
        self.account_mut(addr).code = Arc::new(code);
    }

    pub fn balance(&self, addr: &Address) -> U256 {
        self.accounts
            .get(addr)
            .map(|a| a.balance)
            .unwrap_or_default()
    }

    pub fn set_balance(&mut self, addr: Address, balance: U256) {
        self.account_mut(addr).balance = balance;
    }

    pub fn storage(&self, addr: &Address) -> Option<&BTreeMap<U256, U256>> {
        self.accounts.get(addr).map(|a| &a.storage)
    }

    pub fn sload(&self, addr: &Address, key: &U256) -> U256 {
        self.accounts
            .get(addr)
            .and_then(|a| a.storage.get(key).copied())
            .unwrap_or_default()
    }

    pub fn sstore(&mut self, addr: Address, key: U256, value: U256) {
        let storage = &mut self.account_mut(addr).storage;
        if value.is_zero() {
            storage.remove(&key);
        } else {
            storage.insert(key, value);
        }
    }

    /// Move `value` wei; false if the sender cannot cover it.
    pub fn transfer(&mut self, from: Address, to: Address, value: U256) -> bool {
        if value.is_zero() {
            self.account_mut(to);
            return true;
        }
        let have = self.balance(&from);
        if have < value {
            return false;
        }
        self.account_mut(from).balance = have - value;
        let dest = self.account_mut(to);
        dest.balance = dest.balance.saturating_add(value);
        true
    }
}

/// One transaction of a fixture corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub from: Address,
    /// `None` creates a contract from `data`.
    #[serde(default)]
    pub to: Option<Address>,
    #[serde(default, with = "json::bytes")]
    pub data: Vec<u8>,
    #[serde(default, with = "json::word")]
    pub value: U256,
    #[serde(with = "json::uint")]
    pub gas: u64,
}

impl Transaction {
    pub fn call(from: Address, to: Address, data: Vec<u8>, gas: u64) -> Self {
        Transaction {
            id: None,
            from,
            to: Some(to),
            data,
            value: U256::zero(),
            gas,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_value(mut self, value: U256) -> Self {
        self.value = value;
        self
    }

    /// Identifier used in reports: the explicit id, else the list index.
    pub fn label(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| index.to_string())
    }

    pub fn env(&self) -> TxEnv {
        TxEnv {
            sender: self.from,
            recipient: self.to,
            data: self.data.clone(),
            value: self.value,
            gas_limit: self.gas,
            gas_accounting_enabled: true,
        }
    }
}

/// A world plus a transaction list, the on-disk fixture format.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub accounts: BTreeMap<Address, Account>,
    #[serde(default)]
    pub transactions: Vec<Transaction>,
}

impl Fixture {
    pub fn world(&self) -> WorldState {
        WorldState {
            accounts: self.accounts.clone(),
        }
    }
}

/// Transaction lists are accepted bare or wrapped in `{"transactions": [...]}`.
pub fn parse_transactions(text: &str) -> Result<Vec<Transaction>, serde_json::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Bare(Vec<Transaction>),
        Wrapped { transactions: Vec<Transaction> },
    }
    Ok(match serde_json::from_str::<Either>(text)? {
        Either::Bare(v) => v,
        Either::Wrapped { transactions } => transactions,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxEnv {
    pub sender: Address,
    pub recipient: Option<Address>,
    pub data: Vec<u8>,
    pub value: U256,
    pub gas_limit: u64,
    pub gas_accounting_enabled: bool,
}

/// Fixture-configurable block context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEnv {
    #[serde(with = "json::uint")]
    pub number: u64,
    #[serde(with = "json::uint")]
    pub timestamp: u64,
    pub coinbase: Address,
    #[serde(with = "json::uint")]
    pub gas_limit: u64,
    #[serde(with = "json::word")]
    pub difficulty: U256,
    #[serde(with = "json::uint")]
    pub chain_id: u64,
    #[serde(with = "json::word")]
    pub gas_price: U256,
}

impl Default for BlockEnv {
    fn default() -> Self {
        BlockEnv {
            number: 7_755_100,
            timestamp: 1_557_705_600,
            coinbase: Address::zero(),
            gas_limit: 8_000_000,
            difficulty: U256::from(2_000_000_000_000u64),
            chain_id: 1,
            gas_price: U256::from(1_000_000_000u64),
        }
    }
}
