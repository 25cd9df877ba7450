//! Keccak-256 and function selectors.

use primitive_types::{H256, U256};
use sha3::{Digest, Keccak256};
use std::fmt;

pub fn keccak256(data: &[u8]) -> H256 {
    H256::from_slice(&Keccak256::digest(data))
}

/// Four-byte function identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selector(pub [u8; 4]);

impl Selector {
    /// Selector of a signature such as `transfer(address,uint256)`.
    /// Whitespace is dropped and `uint`/`int` widen to their 256-bit forms.
    pub fn from_signature(signature: &str) -> Selector {
        let normalized = normalize_signature(signature);
        let hash = keccak256(normalized.as_bytes());
        let mut out = [0u8; 4];
        out.copy_from_slice(&hash.as_bytes()[..4]);
        Selector(out)
    }

    pub fn from_hex(text: &str) -> Option<Selector> {
        let digits = text.strip_prefix("0x").unwrap_or(text);
        if digits.len() != 8 {
            return None;
        }
        let bytes = hex::decode(digits).ok()?;
        Some(Selector([bytes[0], bytes[1], bytes[2], bytes[3]]))
    }

    pub fn as_u32(self) -> u32 {
        u32::from_be_bytes(self.0)
    }

    pub fn to_word(self) -> U256 {
        U256::from(self.as_u32())
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl serde::Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = <String as serde::Deserialize>::deserialize(d)?;
        Selector::from_hex(&text).ok_or_else(|| serde::de::Error::custom("expected 4-byte hex selector"))
    }
}

pub fn normalize_signature(signature: &str) -> String {
    let compact: String = signature.chars().filter(|c| !c.is_whitespace()).collect();
    let mut out = String::with_capacity(compact.len() + 8);
    let mut token = String::new();
    let flush = |token: &mut String, out: &mut String| {
        match token.as_str() {
            "uint" => out.push_str("uint256"),
            "int" => out.push_str("int256"),
            "byte" => out.push_str("bytes1"),
            other => out.push_str(other),
        }
        token.clear();
    };
    let mut in_params = false;
    for c in compact.chars() {
        if in_params && (c == ',' || c == '(' || c == ')' || c == '[' || c == ']') {
            flush(&mut token, &mut out);
            out.push(c);
        } else if c == '(' && !in_params {
            in_params = true;
            out.push_str(&token);
            token.clear();
            out.push(c);
        } else {
            token.push(c);
        }
    }
    flush(&mut token, &mut out);
    out
}
