//! Contract code and transaction histories over Ethereum JSON-RPC.
//!
//! Only `eth_getCode` and `eth_getBlockByNumber` are used, so any node
//! works. Transactions are found by scanning blocks, which is slow on
//! long ranges; the range is capped for that reason. Results are cached
//! on disk per (address, block) and normalized to the fixture format the
//! replay engine reads.

mod cache;

pub use cache::{DiskCache, CACHE_DIR_ENV};

use bytepatch_core::minievm::{Address, Transaction};
use futures::stream::{self, StreamExt, TryStreamExt};
use primitive_types::U256;
use serde::Deserialize;
use serde_json::{json, Value};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("rpc error: {0}")]
    Rpc(String),
    #[error("{address:?} has no code at block {block}")]
    EmptyCode { address: Address, block: String },
    #[error("blocks {from}..={to} exceed the cap of {cap}")]
    RangeTooLarge { from: u64, to: u64, cap: u64 },
    #[error("malformed response: {0}")]
    InvalidResponse(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("cache: {0}")]
    Cache(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total tries, including the first.
    pub max_attempts: u32,
    /// Wait before retry `n` is `backoff * n`.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RpcEndpoint {
    pub url: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl RpcEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Result<Self, IngestError> {
        let url = url.into();
        if timeout.is_zero() {
            return Err(IngestError::InvalidEndpoint("timeout must be positive".into()));
        }
        if retry.max_attempts == 0 {
            return Err(IngestError::InvalidEndpoint("at least one attempt is needed".into()));
        }
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(IngestError::InvalidEndpoint(format!("`{url}` is not an http(s) url")));
        }
        Ok(RpcEndpoint { url, timeout, retry })
    }

    /// 30 s timeout, default retries.
    pub fn with_defaults(url: impl Into<String>) -> Result<Self, IngestError> {
        Self::new(url, Duration::from_secs(30), RetryPolicy::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockTag {
    Latest,
    Number(u64),
}

impl fmt::Display for BlockTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockTag::Latest => f.write_str("latest"),
            BlockTag::Number(n) => write!(f, "{n:#x}"),
        }
    }
}

pub struct Fetcher {
    endpoint: RpcEndpoint,
    http: reqwest::Client,
    cache: Option<DiskCache>,
    /// Largest block range `fetch_transactions` accepts.
    pub max_blocks: u64,
    /// Block requests allowed in flight at once.
    pub in_flight: usize,
    next_id: AtomicU64,
}

impl Fetcher {
    pub fn new(endpoint: RpcEndpoint, cache: Option<DiskCache>) -> Result<Self, IngestError> {
        let http = reqwest::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| IngestError::InvalidEndpoint(e.to_string()))?;
        Ok(Fetcher {
            endpoint,
            http,
            cache,
            max_blocks: 10_000,
            in_flight: 8,
            next_id: AtomicU64::new(1),
        })
    }

    async fn call(&self, method: &str, params: Value) -> Result<Value, IngestError> {
        let body = json!({
            "jsonrpc": "2.0",
            "id": self.next_id.fetch_add(1, Ordering::Relaxed),
            "method": method,
            "params": params,
        });
        let retry = &self.endpoint.retry;
        let mut last = String::new();
        for attempt in 1..=retry.max_attempts {
            if attempt > 1 {
                tokio::time::sleep(retry.backoff * (attempt - 1)).await;
            }
            let resp = match self.http.post(&self.endpoint.url).json(&body).send().await {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                last = format!("http {status}");
                continue;
            }
            if !status.is_success() {
                return Err(IngestError::Rpc(format!("http {status}")));
            }
            let reply: Value = resp
                .json()
                .await
                .map_err(|e| IngestError::InvalidResponse(e.to_string()))?;
            if let Some(err) = reply.get("error") {
                let msg = err.get("message").and_then(Value::as_str).unwrap_or("unknown error");
                return Err(IngestError::Rpc(format!("{method}: {msg}")));
            }
            return reply
                .get("result")
                .cloned()
                .ok_or_else(|| IngestError::InvalidResponse(format!("{method}: no result")));
        }
        Err(IngestError::Rpc(format!(
            "{method} failed after {} attempts: {last}",
            retry.max_attempts
        )))
    }

    /// Runtime code of `address` at `block`. Numbered blocks are cached.
    pub async fn fetch_code(&self, address: Address, block: BlockTag) -> Result<Vec<u8>, IngestError> {
        let cached = match (&self.cache, block) {
            (Some(cache), BlockTag::Number(n)) => Some((cache, n)),
            _ => None,
        };
        if let Some((cache, n)) = cached {
            if let Some(code) = cache.load_code(&address, n)? {
                return Ok(code);
            }
        }
        let result = self
            .call("eth_getCode", json!([format!("{address:?}"), block.to_string()]))
            .await?;
        let code = decode_hex(&result)?;
        if code.is_empty() {
            return Err(IngestError::EmptyCode {
                address,
                block: block.to_string(),
            });
        }
        if let Some((cache, n)) = cached {
            cache.store_code(&address, n, &code)?;
        }
        Ok(code)
    }

    /// External transactions sent to `address` in blocks `from..=to`, in
    /// chain order. Reverted transactions are included.
    pub async fn fetch_transactions(&self, address: Address, from: u64, to: u64) -> Result<Vec<Transaction>, IngestError> {
        if from > to {
            return Ok(Vec::new());
        }
        if to - from >= self.max_blocks {
            return Err(IngestError::RangeTooLarge {
                from,
                to,
                cap: self.max_blocks,
            });
        }
        let per_block: Vec<Vec<Transaction>> = stream::iter(from..=to)
            .map(|n| self.block_transactions(address, n))
            .buffered(self.in_flight.max(1))
            .try_collect()
            .await?;
        Ok(per_block.into_iter().flatten().collect())
    }

    async fn block_transactions(&self, address: Address, number: u64) -> Result<Vec<Transaction>, IngestError> {
        if let Some(cache) = &self.cache {
            if let Some(txs) = cache.load_transactions(&address, number)? {
                return Ok(txs);
            }
        }
        let result = self
            .call("eth_getBlockByNumber", json!([BlockTag::Number(number).to_string(), true]))
            .await?;
        if result.is_null() {
            return Err(IngestError::InvalidResponse(format!("block {number} not found")));
        }
        let block: RpcBlock =
            serde_json::from_value(result).map_err(|e| IngestError::InvalidResponse(format!("block {number}: {e}")))?;
        let txs = block
            .transactions
            .into_iter()
            .filter(|t| t.to == Some(address))
            .map(|t| t.normalize(address))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(cache) = &self.cache {
            cache.store_transactions(&address, number, &txs)?;
        }
        Ok(txs)
    }
}

#[derive(Deserialize)]
struct RpcBlock {
    transactions: Vec<RpcTransaction>,
}

#[derive(Deserialize)]
struct RpcTransaction {
    #[serde(default)]
    hash: Option<String>,
    from: Address,
    #[serde(default)]
    to: Option<Address>,
    input: String,
    value: U256,
    gas: U256,
}

impl RpcTransaction {
    fn normalize(self, to: Address) -> Result<Transaction, IngestError> {
        let data = decode_hex(&Value::String(self.input))?;
        let gas = u64::try_from(self.gas).map_err(|_| IngestError::InvalidResponse("gas exceeds 64 bits".into()))?;
        Ok(Transaction {
            id: self.hash,
            from: self.from,
            to: Some(to),
            data,
            value: self.value,
            gas,
        })
    }
}

fn decode_hex(v: &Value) -> Result<Vec<u8>, IngestError> {
    let s = v
        .as_str()
        .ok_or_else(|| IngestError::InvalidResponse(format!("expected hex string, got {v}")))?;
    let digits = s.strip_prefix("0x").unwrap_or(s);
    hex::decode(digits).map_err(|e| IngestError::InvalidResponse(format!("bad hex: {e}")))
}
