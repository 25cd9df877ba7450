//! Base gas schedules.
//!
//! Each fork is a data table of static costs. Dynamic components (memory
//! expansion, copy words, storage writes, call stipends) live in the
//! interpreter.

use crate::opcode::Opcode;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fork {
    /// Constantinople without net gas metering, as shipped by 2019-era clients.
    #[default]
    Petersburg,
    Istanbul,
}

impl FromStr for Fork {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "petersburg" | "constantinople" => Ok(Fork::Petersburg),
            "istanbul" => Ok(Fork::Istanbul),
            other => Err(format!("unknown fork `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("opcode {0} has no cost in fork {1:?}")]
pub struct UnknownOpcode(pub Opcode, pub Fork);

/// Static cost per opcode for one fork; `None` marks opcodes the fork lacks.
#[derive(Clone)]
pub struct GasSchedule {
    fork: Fork,
    costs: [Option<u64>; 256],
}

const PETERSBURG: &[(u8, u64)] = &[
    (0x00, 0),
    (0x01, 3),
    (0x02, 5),
    (0x03, 3),
    (0x04, 5),
    (0x05, 5),
    (0x06, 5),
    (0x07, 5),
    (0x08, 8),
    (0x09, 8),
    (0x0a, 10),
    (0x0b, 5),
    (0x10, 3),
    (0x11, 3),
    (0x12, 3),
    (0x13, 3),
    (0x14, 3),
    (0x15, 3),
    (0x16, 3),
    (0x17, 3),
    (0x18, 3),
    (0x19, 3),
    (0x1a, 3),
    (0x1b, 3),
    (0x1c, 3),
    (0x1d, 3),
    (0x20, 30),
    (0x30, 2),
    (0x31, 400),
    (0x32, 2),
    (0x33, 2),
    (0x34, 2),
    (0x35, 3),
    (0x36, 2),
    (0x37, 3),
    (0x38, 2),
    (0x39, 3),
    (0x3a, 2),
    (0x3b, 700),
    (0x3c, 700),
    (0x3d, 2),
    (0x3e, 3),
    (0x3f, 400),
    (0x40, 20),
    (0x41, 2),
    (0x42, 2),
    (0x43, 2),
    (0x44, 2),
    (0x45, 2),
    (0x50, 2),
    (0x51, 3),
    (0x52, 3),
    (0x53, 3),
    (0x54, 200),
    (0x55, 0),
    (0x56, 8),
    (0x57, 10),
    (0x58, 2),
    (0x59, 2),
    (0x5a, 2),
    (0x5b, 1),
    (0xa0, 375),
    (0xa1, 750),
    (0xa2, 1125),
    (0xa3, 1500),
    (0xa4, 1875),
    (0xf0, 32000),
    (0xf1, 700),
    (0xf2, 700),
    (0xf3, 0),
    (0xf4, 700),
    (0xf5, 32000),
    (0xfa, 700),
    (0xfd, 0),
    (0xfe, 0),
    (0xff, 5000),
];

const ISTANBUL_OVERRIDES: &[(u8, u64)] = &[
    (0x31, 700),
    (0x3f, 700),
    (0x46, 2),
    (0x47, 5),
    (0x54, 800),
];

impl GasSchedule {
    pub fn for_fork(fork: Fork) -> Self {
        let mut costs = [None; 256];
        for &(op, cost) in PETERSBURG {
            costs[op as usize] = Some(cost);
        }
        for op in 0x60..=0x9fu8 {
            costs[op as usize] = Some(3);
        }
        if fork == Fork::Istanbul {
            for &(op, cost) in ISTANBUL_OVERRIDES {
                costs[op as usize] = Some(cost);
            }
        }
        GasSchedule { fork, costs }
    }

    pub fn fork(&self) -> Fork {
        self.fork
    }

    pub fn static_gas(&self, op: Opcode) -> Result<u64, UnknownOpcode> {
        self.costs[op.0 as usize].ok_or(UnknownOpcode(op, self.fork))
    }

    /// Cost of an opcode; undefined bytes are free (they halt).
    pub fn cost_or_zero(&self, op: Opcode) -> u64 {
        self.costs[op.0 as usize].unwrap_or(0)
    }
}

impl Default for GasSchedule {
    fn default() -> Self {
        GasSchedule::for_fork(Fork::default())
    }
}

/// Base gas of `op` under the default fork.
pub fn static_gas_of(op: Opcode) -> Result<u64, UnknownOpcode> {
    GasSchedule::default().static_gas(op)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_costs() {
        assert_eq!(static_gas_of(Opcode::PUSH1), Ok(3));
        assert_eq!(static_gas_of(Opcode::JUMP), Ok(8));
        assert_eq!(static_gas_of(Opcode::JUMPI), Ok(10));
        assert_eq!(static_gas_of(Opcode::JUMPDEST), Ok(1));
        for op in [Opcode::ADD, Opcode::DUP1, Opcode::SWAP2, Opcode::LT, Opcode::ISZERO] {
            assert_eq!(static_gas_of(op), Ok(3));
        }
        assert_eq!(static_gas_of(Opcode::STOP), Ok(0));
        assert_eq!(static_gas_of(Opcode::INVALID), Ok(0));
    }

    #[test]
    fn unknown_opcodes() {
        assert!(static_gas_of(Opcode(0x0c)).is_err());
        assert!(static_gas_of(Opcode::CHAINID).is_err());
        let ist = GasSchedule::for_fork(Fork::Istanbul);
        assert_eq!(ist.static_gas(Opcode::CHAINID), Ok(2));
        assert_eq!(ist.static_gas(Opcode::SLOAD), Ok(800));
    }
}
