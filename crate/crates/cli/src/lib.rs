//! File formats and image ingestion for the `dualview` command-line tool:
//! binary PPM decoding, the `DPT1` tensor container, the parameter bundle,
//! and key=value pipeline configs. Everything round-trips bit-exactly.

pub mod config;
pub mod dpt;
pub mod imgload;
pub mod params;
pub mod ppm;

use std::path::PathBuf;

/// Errors from the IO layer. Core contract violations pass through unchanged.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("bad config {path}: {detail}")]
    Config { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] dualview_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::CorruptFile {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Seed used when neither a flag nor a config provides one; the
/// `DUALVIEW_SEED` environment variable overrides the built-in default of 0.
pub fn default_seed() -> u64 {
    std::env::var("DUALVIEW_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Write-temp-then-rename so readers never observe a partial file.
pub(crate) fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(())
}
