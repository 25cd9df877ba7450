//! `pipeline` configuration file (TOML). Relative paths are resolved
//! against the directory holding the file.

use crate::error::CliError;
use crate::io;
use crate::stages::relative_to;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub code: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub dsl: Option<PathBuf>,
    /// Storage name map for the DSL.
    pub names: Option<PathBuf>,
    pub signatures: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub txs: Option<PathBuf>,
    pub contract: Option<String>,
    #[serde(default)]
    pub known_attacks: Vec<String>,
    pub fork: Option<String>,
    pub step_limit: Option<u64>,
    #[serde(default)]
    pub strict_logs: bool,
    pub out_dir: Option<PathBuf>,
    pub deploy: Option<DeployConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployConfig {
    pub owner: String,
    #[serde(default)]
    pub nonce: u64,
    /// Upgrade this proxy instead of planning a fresh deployment.
    pub proxy: Option<String>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = io::read_text(path)?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.code,
            &mut cfg.report,
            &mut cfg.dsl,
            &mut cfg.names,
            &mut cfg.signatures,
            &mut cfg.templates,
            &mut cfg.world,
            &mut cfg.txs,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            *p = relative_to(base, p);
        }
        cfg.out_dir.get_or_insert_with(|| base.join("out"));
        Ok(cfg)
    }

    /// Every referenced input must exist before any stage runs.
    pub fn check_inputs(&self) -> Result<(), CliError> {
        for (name, required) in [("code", &self.code), ("report", &self.report), ("world", &self.world)] {
            if required.is_none() {
                return Err(CliError::input(format!("pipeline needs `{name}`")));
            }
        }
        let named = [
            ("code", &self.code),
            ("report", &self.report),
            ("dsl", &self.dsl),
            ("names", &self.names),
            ("signatures", &self.signatures),
            ("templates", &self.templates),
            ("world", &self.world),
            ("txs", &self.txs),
        ];
        for (name, p) in named {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::input(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}
