//! Serde adapters for the JSON fixture formats.
//!
//! Quantities are accepted as JSON numbers, decimal strings or `0x` hex
//! strings and are always written back as `0x` hex.

use primitive_types::U256;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub fn parse_quantity(text: &str) -> Result<U256, String> {
    let t = text.trim();
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        if h.is_empty() {
            return Ok(U256::zero());
        }
        U256::from_str_radix(h, 16).map_err(|e| format!("bad hex quantity `{t}`: {e:?}"))
    } else {
        U256::from_dec_str(t).map_err(|e| format!("bad decimal quantity `{t}`: {e:?}"))
    }
}

pub fn format_quantity(value: &U256) -> String {
    format!("{value:#x}")
}

struct QuantityVisitor;

impl<'de> Visitor<'de> for QuantityVisitor {
    type Value = U256;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number or a decimal/hex string")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<U256, E> {
        Ok(U256::from(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<U256, E> {
        u64::try_from(v)
            .map(U256::from)
            .map_err(|_| E::custom("negative quantity"))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<U256, E> {
        parse_quantity(v).map_err(E::custom)
    }
}

/// `#[serde(with = "json::word")]`
pub mod word {
    use super::*;

    pub fn serialize<S: Serializer>(v: &U256, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_quantity(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<U256, D::Error> {
        d.deserialize_any(QuantityVisitor)
    }
}

/// `u64` quantities in the same flexible encoding; written as plain numbers.
pub mod uint {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let v = d.deserialize_any(QuantityVisitor)?;
        if v > U256::from(u64::MAX) {
            return Err(de::Error::custom("quantity exceeds 64 bits"));
        }
        Ok(v.as_u64())
    }
}

/// Hex byte strings.
pub mod bytes {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::asm::to_hex(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        crate::asm::parse_hex(&text).map_err(de::Error::custom)
    }
}

/// Storage maps keyed and valued by words.
pub mod word_map {
    use super::*;

    pub fn serialize<S: Serializer>(v: &BTreeMap<U256, U256>, s: S) -> Result<S::Ok, S::Error> {
        // Numeric key order, not string order.
        s.collect_map(v.iter().map(|(k, v)| (format_quantity(k), format_quantity(v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<U256, U256>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "super::word")] U256);
        let raw: BTreeMap<String, W> = BTreeMap::deserialize(d)?;
        let mut out = BTreeMap::new();
        for (k, W(v)) in raw {
            let key = parse_quantity(&k).map_err(de::Error::custom)?;
            if !v.is_zero() {
                out.insert(key, v);
            }
        }
        Ok(out)
    }
}

/// Word newtype for places where a standalone serde type is handier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Quantity(pub U256);

impl Serialize for Quantity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        word::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        word::deserialize(d).map(Quantity)
    }
}
