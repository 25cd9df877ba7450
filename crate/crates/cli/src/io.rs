use crate::error::CliError;
use bytepatch_core::asm::decode_code_file;
use bytepatch_core::json::parse_quantity;
use bytepatch_core::minievm::Address;
use primitive_types::U256;
use serde::de::DeserializeOwned;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read(path)?).map_err(|_| CliError::input(format!("{}: not UTF-8", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Hex text or raw bytes.
pub fn read_code(path: &Path) -> Result<Vec<u8>, CliError> {
    decode_code_file(&read(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// One signature per line; blank lines and `#` comments are skipped.
/// A JSON array of strings is accepted too.
pub fn read_signatures(path: &Path) -> Result<Vec<String>, CliError> {
    let text = read_text(path)?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())));
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// JSON object of storage variable name to slot, slots as numbers or
/// quantity strings.
pub fn read_names(path: &Path) -> Result<BTreeMap<String, U256>, CliError> {
    let raw: BTreeMap<String, serde_json::Value> = read_json(path)?;
    raw.into_iter()
        .map(|(name, v)| {
            let slot = match &v {
                serde_json::Value::Number(n) => n.as_u64().map(U256::from).ok_or_else(|| format!("{v}")),
                serde_json::Value::String(s) => parse_quantity(s),
                other => Err(format!("{other}")),
            }
            .map_err(|e| CliError::input(format!("{}: slot of `{name}`: {e}", path.display())))?;
            Ok((name, slot))
        })
        .collect()
}

pub fn parse_address(text: &str) -> Result<Address, CliError> {
    let t = text.trim();
    let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    if digits.len() != 40 {
        return Err(CliError::input(format!("`{text}` is not a 20-byte address")));
    }
    let mut out = [0u8; 20];
    for (i, chunk) in digits.as_bytes().chunks(2).enumerate() {
        let pair = std::str::from_utf8(chunk).unwrap_or("");
        out[i] = u8::from_str_radix(pair, 16).map_err(|_| CliError::input(format!("`{text}` is not hex")))?;
    }
    Ok(Address::from(out))
}

/// Write via a temporary file in the target directory, then rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let err = |e: std::io::Error| CliError::input(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(contents).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
