use super::state::Address;
use crate::json;
use primitive_types::{H256, U256};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Sstore,
    Call,
    Delegatecall,
    Staticcall,
    Create,
    Selfdestruct,
    Log,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventParams {
    Storage {
        #[serde(with = "json::word")]
        key: U256,
        #[serde(with = "json::word")]
        value: U256,
    },
    Call {
        target: Address,
        #[serde(with = "json::word")]
        value: U256,
        calldata_hash: H256,
    },
    Create {
        #[serde(with = "json::word")]
        value: U256,
        init_code_hash: H256,
        created: Option<Address>,
    },
    Selfdestruct {
        beneficiary: Address,
        #[serde(with = "json::word")]
        amount: U256,
    },
    Log {
        topics: Vec<H256>,
        data_hash: H256,
    },
}

/// A state-changing instruction as observed during execution.
///
/// Program counters are deliberately absent: the same event is produced
/// at different addresses by original and patched code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub depth: usize,
    /// Storage context the instruction ran in.
    pub context: Address,
    pub params: EventParams,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_data_hash: Option<H256>,
}

impl TraceEvent {
    pub fn is_log(&self) -> bool {
        self.kind == EventKind::Log
    }
}

pub type ExecutionTrace = Vec<TraceEvent>;

/// JSON lines, one event per line.
pub fn trace_to_json_lines(trace: &[TraceEvent]) -> String {
    let mut out = String::new();
    for event in trace {
        out.push_str(&serde_json::to_string(event).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn trace_from_json_lines(text: &str) -> Result<ExecutionTrace, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_lines_roundtrip() {
        let trace = vec![
            TraceEvent {
                kind: EventKind::Sstore,
                depth: 0,
                context: Address::repeat_byte(1),
                params: EventParams::Storage {
                    key: U256::one(),
                    value: U256::from(5),
                },
                success: true,
                return_data_hash: None,
            },
            TraceEvent {
                kind: EventKind::Call,
                depth: 0,
                context: Address::repeat_byte(1),
                params: EventParams::Call {
                    target: Address::repeat_byte(2),
                    value: U256::zero(),
                    calldata_hash: H256::zero(),
                },
                success: false,
                return_data_hash: Some(H256::repeat_byte(3)),
            },
        ];
        let text = trace_to_json_lines(&trace);
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"kind":"SSTORE""#));
        assert_eq!(trace_from_json_lines(&text).unwrap(), trace);
    }
}
