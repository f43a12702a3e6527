use std::path::PathBuf;

use thiserror::Error;

/// Why a persisted artifact failed to load. Each corruption mode is reported
/// distinctly so callers (and tests) can tell a bad CRC from a short read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFault {
    BadMagic,
    VersionMismatch,
    CrcMismatch,
    Truncated,
}

impl std::fmt::Display for FileFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FileFault::BadMagic => "bad magic",
            FileFault::VersionMismatch => "version mismatch",
            FileFault::CrcMismatch => "crc mismatch",
            FileFault::Truncated => "truncated file",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum HgError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("validation: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt artifact {path}: {fault}")]
    Corrupt { path: PathBuf, fault: FileFault },
    #[error("config hash mismatch for {path} (pass --force to override)")]
    HashMismatch { path: PathBuf },
}

impl HgError {
    pub fn validation(msg: impl Into<String>) -> Self {
        HgError::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        HgError::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 0 success, 1 usage, 2 validation
    /// (including unreadable/corrupt inputs), 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HgError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HgError>;
