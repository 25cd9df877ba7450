use crate::IngestError;
use bytepatch_core::minievm::{Address, Transaction};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Overrides the cache location.
pub const CACHE_DIR_ENV: &str = "BYTEPATCH_CACHE_DIR";

/// One JSON file per (address, block) and kind:
/// `<root>/<address>/<block>.code.json` and `<root>/<address>/<block>.txs.json`.
#[derive(Clone, Debug)]
pub struct DiskCache {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CodeEntry {
    #[serde(with = "bytepatch_core::json::bytes")]
    code: Vec<u8>,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskCache { root: root.into() }
    }

    /// `$BYTEPATCH_CACHE_DIR`, else `.bytepatch-cache` in the working directory.
    pub fn from_env() -> Self {
        let root = std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".bytepatch-cache"));
        DiskCache::new(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, address: &Address, block: u64, kind: &str) -> PathBuf {
        self.root.join(format!("{address:?}")).join(format!("{block}.{kind}.json"))
    }

    fn load<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<Option<T>, IngestError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| IngestError::Cache(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(IngestError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    fn store<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), IngestError> {
        let err = |e: std::io::Error| IngestError::Cache(format!("{}: {e}", path.display()));
        let dir = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(dir).map_err(err)?;
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| IngestError::Cache(e.to_string()))?;
        // Concurrent writers of one key race benignly: rename is atomic.
        let tmp = dir.join(format!(
            ".{}.{}.tmp",
            path.file_name().unwrap().to_string_lossy(),
            std::process::id()
        ));
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(&bytes).map_err(err)?;
        f.sync_all().map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }

    pub fn load_code(&self, address: &Address, block: u64) -> Result<Option<Vec<u8>>, IngestError> {
        Ok(self.load::<CodeEntry>(&self.path(address, block, "code"))?.map(|e| e.code))
    }

    pub fn store_code(&self, address: &Address, block: u64, code: &[u8]) -> Result<(), IngestError> {
        self.store(&self.path(address, block, "code"), &CodeEntry { code: code.to_vec() })
    }

    pub fn load_transactions(&self, address: &Address, block: u64) -> Result<Option<Vec<Transaction>>, IngestError> {
        self.load(&self.path(address, block, "txs"))
    }

    pub fn store_transactions(&self, address: &Address, block: u64, txs: &[Transaction]) -> Result<(), IngestError> {
        self.store(&self.path(address, block, "txs"), &txs)
    }
}
