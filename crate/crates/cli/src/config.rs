//! Pipeline configuration files: line-oriented `key=value` text, `#`
//! comments, the same format the crop manifests use.
//!
//! Recognized keys:
//!   enc_w, enc_h, patch, dim     encoder geometry (required)
//!   projector_out                output channels (required)
//!   fusion                      fusion variant name (default linear_concat)
//!   seed                        u64 (default: DUALVIEW_SEED or 0)
//!   multires                    0/1 (default 0)
//!   low_w, low_h                low branch size (default: encoder size)
//!   ablation                    full | dcm_local_only | dcm_global_only | dcm_add

use std::collections::BTreeMap;
use std::path::Path;

use dualview_core::encoder::VisionEncoderSpec;
use dualview_core::pipeline::{AblationMode, MultiresSpec, PipelineConfig};

use crate::{CliError, Result};

/// Parse `key=value` lines into a map, rejecting malformed lines and
/// duplicate keys.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
            path: path.to_path_buf(),
            detail: format!("line {}: expected key=value, got {:?}", lineno + 1, raw),
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                detail: format!("line {}: duplicate key {:?}", lineno + 1, key),
            });
        }
    }
    Ok(map)
}

fn bad(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn require<T: std::str::FromStr>(&mut self, key: &str, path: &Path) -> Result<T> {
        let raw = self
            .map
            .remove(key)
            .ok_or_else(|| bad(path, format!("missing key {:?}", key)))?;
        raw.parse()
            .map_err(|_| bad(path, format!("{}={:?} is not valid", key, raw)))
    }

    fn optional<T: std::str::FromStr>(&mut self, key: &str, path: &Path) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| bad(path, format!("{}={:?} is not valid", key, raw))),
        }
    }
}

/// Read and validate a pipeline config file.
pub fn load(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut f = Fields {
        map: parse_kv(&text, path)?,
    };

    let enc_w: usize = f.require("enc_w", path)?;
    let enc_h: usize = f.require("enc_h", path)?;
    let patch: usize = f.require("patch", path)?;
    let dim: usize = f.require("dim", path)?;
    let projector_out: usize = f.require("projector_out", path)?;
    let fusion = f
        .optional("fusion", path)?
        .unwrap_or(dualview_core::dem::FusionVariant::LinearConcat);
    let seed: u64 = f.optional("seed", path)?.unwrap_or_else(crate::default_seed);
    let multires_on = match f.optional::<u8>("multires", path)? {
        None | Some(0) => false,
        Some(1) => true,
        Some(v) => return Err(bad(path, format!("multires={} must be 0 or 1", v))),
    };
    let low_w: usize = f.optional("low_w", path)?.unwrap_or(enc_w);
    let low_h: usize = f.optional("low_h", path)?.unwrap_or(enc_h);
    let ablation = f.optional("ablation", path)?.unwrap_or(AblationMode::Full);

    if let Some(key) = f.map.keys().next() {
        return Err(bad(path, format!("unknown key {:?}", key)));
    }

    let encoder = VisionEncoderSpec::new(enc_w, enc_h, patch, dim)?;
    let cfg = PipelineConfig {
        encoder,
        fusion_variant: fusion,
        multires: multires_on.then_some(MultiresSpec { low_w, low_h }),
        seed,
        projector_out,
        ablation,
    };
    cfg.validate()?;
    Ok(cfg)
}
