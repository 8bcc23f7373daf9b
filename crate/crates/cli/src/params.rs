//! The parameter bundle: a manifest header (fusion variant, dims, seed)
//! followed by named `DPT1` blocks, one per parameter tensor, in a fixed
//! canonical order. Loading then saving reproduces the file byte for byte.

use std::path::Path;

use dualview_core::dem::{AttentionParams, DemParams, FusionVariant};
use dualview_core::encoder::{PatchEmbedParams, IMAGE_CHANNELS};
use dualview_core::pipeline::{PipelineConfig, PipelineParams};
use dualview_core::tensor::{LinearParams, Tensor};

use crate::{dpt, CliError, Result};

pub const MAGIC: [u8; 4] = *b"DPP1";
pub const VERSION: u8 = 1;

/// The header of a parameter file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamsManifest {
    pub fusion: FusionVariant,
    pub seed: u64,
    pub dim: usize,
    pub enc_w: usize,
    pub enc_h: usize,
    pub patch: usize,
    pub projector_out: usize,
}

impl ParamsManifest {
    pub fn of(cfg: &PipelineConfig) -> Self {
        ParamsManifest {
            fusion: cfg.fusion_variant,
            seed: cfg.seed,
            dim: cfg.encoder.dim(),
            enc_w: cfg.encoder.input_w(),
            enc_h: cfg.encoder.input_h(),
            patch: cfg.encoder.patch(),
            projector_out: cfg.projector_out,
        }
    }

    /// The manifest must describe the same geometry the config expects.
    pub fn check_against(&self, cfg: &PipelineConfig, path: &Path) -> Result<()> {
        let want = ParamsManifest::of(cfg);
        // The seed is informative (it records how the file was produced) and
        // does not have to match the config.
        let mut probe = *self;
        probe.seed = want.seed;
        if probe != want {
            return Err(CliError::corrupt(
                path,
                format!("parameter manifest {:?} does not match the config {:?}", self, want),
            ));
        }
        Ok(())
    }
}

fn fusion_tag(v: FusionVariant) -> u8 {
    FusionVariant::ALL.iter().position(|&x| x == v).unwrap() as u8
}

fn fusion_from_tag(tag: u8, path: &Path) -> Result<FusionVariant> {
    FusionVariant::ALL
        .get(tag as usize)
        .copied()
        .ok_or_else(|| CliError::corrupt(path, format!("unknown fusion tag {}", tag)))
}

/// Canonical `(name, tensor)` section list for one parameter set.
fn sections(params: &PipelineParams) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![
        ("encoder.patch.weight".into(), &params.encoder.proj.weight),
        (
            "encoder.patch.bias".into(),
            params.encoder.proj.bias.as_ref().expect("encoder bias"),
        ),
        ("encoder.pos".into(), &params.encoder.pos),
    ];
    let dem = &params.dem;
    for (branch, p) in [("glo", &dem.glo), ("loc", &dem.loc)] {
        out.push((format!("dem.{branch}.query"), &p.query.weight));
        out.push((format!("dem.{branch}.key"), &p.key.weight));
        out.push((format!("dem.{branch}.value"), &p.value.weight));
    }
    out.push(("dem.fuse.glo".into(), &dem.fuse_glo.weight));
    out.push(("dem.fuse.loc".into(), &dem.fuse_loc.weight));
    if let Some(logits) = &dem.weighted_logits {
        out.push(("dem.weighted.logits".into(), logits));
    }
    if let Some(conv) = &dem.conv {
        out.push(("dem.conv.weight".into(), &conv.weight));
        out.push(("dem.conv.bias".into(), conv.bias.as_ref().expect("conv bias")));
    }
    out.push(("projector.weight".into(), &params.projector.weight));
    out.push((
        "projector.bias".into(),
        params.projector.bias.as_ref().expect("projector bias"),
    ));
    out
}

pub fn to_bytes(manifest: &ParamsManifest, params: &PipelineParams) -> Vec<u8> {
    let sections = sections(params);
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(fusion_tag(manifest.fusion));
    out.extend_from_slice(&manifest.seed.to_le_bytes());
    for v in [
        manifest.dim,
        manifest.enc_w,
        manifest.enc_h,
        manifest.patch,
        manifest.projector_out,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, tensor) in sections {
        let blob = dpt::to_bytes(tensor);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| CliError::corrupt(self.path, "truncated parameter file"))?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(ParamsManifest, PipelineParams)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(CliError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "bad magic, expected \"DPP1\"".into(),
        });
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(CliError::corrupt(path, format!("unsupported version {}", version)));
    }
    let fusion = fusion_from_tag(r.take(1)?[0], path)?;
    let seed = r.u64()?;
    let dim = r.u32()? as usize;
    let enc_w = r.u32()? as usize;
    let enc_h = r.u32()? as usize;
    let patch = r.u32()? as usize;
    let projector_out = r.u32()? as usize;
    let n_sections = r.u32()? as usize;

    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CliError::corrupt(path, "section name is not UTF-8"))?;
        let blob_len = r.u64()? as usize;
        let blob = r.take(blob_len)?;
        tensors.push((name, dpt::from_bytes(blob, path)?));
    }
    if r.pos != bytes.len() {
        return Err(CliError::corrupt(path, "trailing bytes after the last section"));
    }

    let mut iter = tensors.into_iter();
    let mut next = |want: &str| -> Result<Tensor> {
        match iter.next() {
            Some((name, t)) if name == want => Ok(t),
            Some((name, _)) => Err(CliError::corrupt(
                path,
                format!("section {:?} where {:?} was expected", name, want),
            )),
            None => Err(CliError::corrupt(path, format!("missing section {:?}", want))),
        }
    };

    let encoder = PatchEmbedParams {
        proj: LinearParams::new(next("encoder.patch.weight")?, Some(next("encoder.patch.bias")?))?,
        pos: next("encoder.pos")?,
    };
    let mut branch = |name: &str| -> Result<AttentionParams> {
        Ok(AttentionParams {
            query: LinearParams::new(next(&format!("dem.{name}.query"))?, None)?,
            key: LinearParams::new(next(&format!("dem.{name}.key"))?, None)?,
            value: LinearParams::new(next(&format!("dem.{name}.value"))?, None)?,
        })
    };
    let glo = branch("glo")?;
    let loc = branch("loc")?;
    let fuse_glo = LinearParams::new(next("dem.fuse.glo")?, None)?;
    let fuse_loc = LinearParams::new(next("dem.fuse.loc")?, None)?;
    let weighted_logits = match fusion {
        FusionVariant::WeightedAddition => Some(next("dem.weighted.logits")?),
        _ => None,
    };
    let conv = match fusion {
        FusionVariant::Conv3x3 => Some(LinearParams::new(
            next("dem.conv.weight")?,
            Some(next("dem.conv.bias")?),
        )?),
        _ => None,
    };
    let projector = LinearParams::new(next("projector.weight")?, Some(next("projector.bias")?))?;
    if let Some((name, _)) = iter.next() {
        return Err(CliError::corrupt(path, format!("unexpected extra section {:?}", name)));
    }

    let dem = DemParams {
        dim,
        glo,
        loc,
        fuse_glo,
        fuse_loc,
        variant: fusion,
        weighted_logits,
        conv,
    };
    // Cross-check the advertised geometry against the tensors themselves.
    let expect_proj_in = patch * patch * IMAGE_CHANNELS;
    if encoder.proj.d_in() != expect_proj_in
        || encoder.proj.d_out() != dim
        || projector.d_in() != dim
        || projector.d_out() != projector_out
    {
        return Err(CliError::corrupt(path, "tensor shapes contradict the manifest"));
    }
    let manifest = ParamsManifest {
        fusion,
        seed,
        dim,
        enc_w,
        enc_h,
        patch,
        projector_out,
    };
    Ok((manifest, PipelineParams { encoder, dem, projector }))
}

pub fn write(path: &Path, manifest: &ParamsManifest, params: &PipelineParams) -> Result<()> {
    crate::atomic_write(path, &to_bytes(manifest, params))
}

pub fn read(path: &Path) -> Result<(ParamsManifest, PipelineParams)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, path)
}
