use bytepatch_core::deploy::DeployError;
use bytepatch_core::difftester::DiffError;
use bytepatch_core::rewriter::RewriteError;
use bytepatch_core::templates::TemplateError;
use bytepatch_ingest::IngestError;
use serde_json::Value;

/// Process exit codes. Stable: scripts branch on them.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    /// Bad command line; clap exits with this itself.
    #[allow(dead_code)]
    pub const USAGE: i32 = 2;
    /// Missing or unreadable input file, bad config.
    pub const INPUT: i32 = 3;
    pub const UNSUPPORTED_CLASS: i32 = 10;
    /// Dispatcher or function name could not be resolved.
    pub const FUNCTION_RESOLUTION: i32 = 11;
    /// DSL missing or malformed.
    pub const DSL: i32 = 12;
    /// A report entry does not point at what its class patches.
    pub const REPORT_MISMATCH: i32 = 13;
    /// A template is malformed or not stack neutral.
    pub const BAD_TEMPLATE: i32 = 14;
    pub const BLOCK_TOO_SMALL: i32 = 15;
    /// Any other rewrite failure (size cap, overlapping patches, ...).
    pub const REWRITE: i32 = 16;
    pub const DIVERGENCE: i32 = 20;
    pub const MISSED_ATTACK: i32 = 21;
    /// Fixture does not fit the contract, or the replay could not finish.
    pub const REPLAY: i32 = 22;
    pub const DEPLOY: i32 = 30;
    pub const FETCH: i32 = 31;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Replay(#[from] DiffError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Fetch(#[from] IngestError),
    /// Replay finished but the patch is not acceptable.
    #[error("{message}")]
    Rejected { code: i32, message: String, details: Value },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        use TemplateError as T;
        match self {
            CliError::Input(_) => exit::INPUT,
            CliError::Template(t) => match t {
                T::UnsupportedVulnerabilityClass(_) => exit::UNSUPPORTED_CLASS,
                T::DispatcherNotRecognized(_) | T::FunctionNotFound(_) | T::AmbiguousFunction { .. } => {
                    exit::FUNCTION_RESOLUTION
                }
                T::MissingDsl | T::Dsl(_) => exit::DSL,
                T::WrongInstruction { .. } | T::BadReportPc { .. } => exit::REPORT_MISMATCH,
                _ => exit::BAD_TEMPLATE,
            },
            CliError::Rewrite(RewriteError::InsufficientBlockSize { .. }) => exit::BLOCK_TOO_SMALL,
            CliError::Rewrite(_) => exit::REWRITE,
            CliError::Replay(_) => exit::REPLAY,
            CliError::Deploy(_) => exit::DEPLOY,
            CliError::Fetch(_) => exit::FETCH,
            CliError::Rejected { code, .. } => *code,
            CliError::Internal(_) => exit::INTERNAL,
        }
    }

    /// Short machine name of the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Template(_) => "template",
            CliError::Rewrite(_) => "rewrite",
            CliError::Replay(_) => "replay",
            CliError::Deploy(_) => "deploy",
            CliError::Fetch(_) => "fetch",
            CliError::Rejected { .. } => "rejected",
            CliError::Internal(_) => "internal",
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = serde_json::json!({
            "ok": false,
            "exit_code": self.exit_code(),
            "kind": self.kind(),
            "error": self.to_string(),
        });
        if let CliError::Rejected { details, .. } = self {
            v["details"] = details.clone();
        }
        v
    }
}
