//! End-to-end visual path: crop both perspectives, encode every sub-image,
//! recombine into high-resolution feature grids, enhance, fuse, pool,
//! optionally add a low-resolution branch, and project to the final token
//! sequence. Also the token/FLOP budget calculator.

use crate::dem::{self, DemParams, FusionVariant};
use crate::encoder::{
    FeatureGrid, PatchEmbedEncoder, PatchEmbedParams, VisionEncoder, VisionEncoderSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{
    global_crop, global_recombine, local_crop, local_recombine, GridSpec, ImageTensor,
    Perspective, SubImageSet,
};
use crate::rng::Rng;
use crate::tensor::{self, LinearParams, Tensor};

/// Which stages of the visual path run; mirrors the module-ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Both crops, both enhancements, fusion: the full module.
    Full,
    /// Local cropping only; the recombined local grid goes straight to pooling.
    DcmLocalOnly,
    /// Global cropping only.
    DcmGlobalOnly,
    /// Both crops, no enhancement; grids merged by elementwise addition.
    DcmAdd,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::DcmLocalOnly,
        AblationMode::DcmGlobalOnly,
        AblationMode::DcmAdd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::DcmLocalOnly => "dcm_local_only",
            AblationMode::DcmGlobalOnly => "dcm_global_only",
            AblationMode::DcmAdd => "dcm_add",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optional low-resolution branch: the input is area-downscaled to this size,
/// encoded directly, and added to the pooled dual-enhanced grid. The size
/// must equal the encoder input size so the two grids line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiresSpec {
    pub low_w: usize,
    pub low_h: usize,
}

/// Everything needed to run the visual path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub encoder: VisionEncoderSpec,
    pub fusion_variant: FusionVariant,
    pub multires: Option<MultiresSpec>,
    pub seed: u64,
    pub projector_out: usize,
    pub ablation: AblationMode,
}

impl PipelineConfig {
    pub fn new(encoder: VisionEncoderSpec, projector_out: usize, seed: u64) -> Result<Self> {
        let cfg = PipelineConfig {
            encoder,
            fusion_variant: FusionVariant::LinearConcat,
            multires: None,
            seed,
            projector_out,
            ablation: AblationMode::Full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.projector_out == 0 {
            return Err(Error::shape(
                "PipelineConfig",
                "projector_out must be >= 1".to_string(),
            ));
        }
        if let Some(m) = &self.multires {
            if m.low_w != self.encoder.input_w() || m.low_h != self.encoder.input_h() {
                return Err(Error::shape(
                    "PipelineConfig",
                    format!(
                        "multires low size {}x{} must equal encoder input {}x{}",
                        m.low_w,
                        m.low_h,
                        self.encoder.input_w(),
                        self.encoder.input_h()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Small geometry used throughout the test suites: encoder 8x8, patch 4,
    /// feature dim 8 (a 2x2 token grid per sub-image).
    pub fn toy(seed: u64) -> Self {
        PipelineConfig {
            encoder: VisionEncoderSpec::new(8, 8, 4, 8).expect("toy encoder spec"),
            fusion_variant: FusionVariant::LinearConcat,
            multires: None,
            seed,
            projector_out: 8,
            ablation: AblationMode::Full,
        }
    }
}

/// All learnable state of the pipeline, drawn in a fixed order from the
/// config seed: encoder, enhancement module, projector.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub encoder: PatchEmbedParams,
    pub dem: DemParams,
    pub projector: LinearParams,
}

impl PipelineParams {
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let encoder = PatchEmbedParams::init(&cfg.encoder, &mut rng);
        let dem = DemParams::init(cfg.encoder.dim(), cfg.fusion_variant, &mut rng)?;
        let std = 1.0 / (cfg.encoder.dim() as f64).sqrt();
        let projector =
            LinearParams::init_normal(cfg.encoder.dim(), cfg.projector_out, std, true, &mut rng);
        Ok(PipelineParams {
            encoder,
            dem,
            projector,
        })
    }
}

/// The pipeline output: `h_l * w_l` projected vectors in row-major cell
/// order, each tagged with its `(y, x)` cell of origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    rows: Tensor,
    provenance: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }

    /// `(y, x)` cell of origin of token `i`.
    pub fn provenance(&self, i: usize) -> (usize, usize) {
        self.provenance[i]
    }

    /// The `(tokens) x (projector_out)` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }
}

/// Integer-factor area downscale (block mean); the factors must divide the
/// image extents.
fn downscale(img: &ImageTensor, low_w: usize, low_h: usize) -> Result<ImageTensor> {
    if img.width() % low_w != 0 {
        return Err(Error::NotDivisible {
            extent: img.width(),
            kernel: low_w,
        });
    }
    if img.height() % low_h != 0 {
        return Err(Error::NotDivisible {
            extent: img.height(),
            kernel: low_h,
        });
    }
    let t = Tensor::new(
        vec![img.height(), img.width(), img.channels()],
        img.data().to_vec(),
    )?;
    let pooled = tensor::avg_pool(&t, img.height() / low_h, img.width() / low_w)?;
    ImageTensor::new(low_h, low_w, img.channels(), pooled.into_data())
}

fn encode_all(
    subs: &SubImageSet<ImageTensor>,
    encoder: &dyn VisionEncoder,
) -> Result<Vec<FeatureGrid>> {
    subs.items().iter().map(|img| encoder.encode(img)).collect()
}

/// Run the visual path with an arbitrary encoder behind the
/// [`VisionEncoder`] contract.
pub fn run_with_encoder(
    img: &ImageTensor,
    cfg: &PipelineConfig,
    encoder: &dyn VisionEncoder,
    dem_params: &DemParams,
    projector: &LinearParams,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let spec = encoder.spec();
    let grid = GridSpec::new(img.width(), img.height(), spec.input_w(), spec.input_h())?;
    let fgrid = grid.with_tile_size(spec.tokens_w(), spec.tokens_h())?;

    let f_local = || -> Result<FeatureGrid> {
        let subs = local_crop(img, &grid)?;
        let feats = encode_all(&subs, encoder)?;
        local_recombine(&SubImageSet::new(fgrid, Perspective::Local, feats)?)
    };
    let f_global = || -> Result<FeatureGrid> {
        let subs = global_crop(img, &grid)?;
        let feats = encode_all(&subs, encoder)?;
        global_recombine(&SubImageSet::new(fgrid, Perspective::Global, feats)?)
    };

    // Every mode ends with a grid pooled back to h_l x w_l x d.
    let pooled = match cfg.ablation {
        AblationMode::Full => {
            let f_loc = f_local()?;
            let f_glo = f_global()?;
            dem::run_dem(&f_glo, &f_loc, &fgrid, dem_params)?.f_dual
        }
        AblationMode::DcmLocalOnly => dem::dual_pool(&f_local()?, &fgrid)?,
        AblationMode::DcmGlobalOnly => dem::dual_pool(&f_global()?, &fgrid)?,
        AblationMode::DcmAdd => {
            let f_loc = f_local()?;
            let f_glo = f_global()?;
            let summed = FeatureGrid::new(
                fgrid.img_h(),
                fgrid.img_w(),
                spec.dim(),
                tensor::add(f_loc.tensor(), f_glo.tensor())?,
            )?;
            dem::dual_pool(&summed, &fgrid)?
        }
    };

    let combined = match &cfg.multires {
        Some(m) => {
            let low_img = downscale(img, m.low_w, m.low_h)?;
            let f_low = encoder.encode(&low_img)?;
            dem::multires_combine(&f_low, &pooled)?
        }
        None => pooled,
    };

    let projected = tensor::linear(&combined.tokens(), projector)?;
    let provenance = (0..combined.h())
        .flat_map(|y| (0..combined.w()).map(move |x| (y, x)))
        .collect();
    Ok(TokenSequence {
        rows: projected,
        provenance,
    })
}

/// Run the visual path with the toy patch-embedding encoder.
pub fn run(img: &ImageTensor, cfg: &PipelineConfig, params: &PipelineParams) -> Result<TokenSequence> {
    let encoder = PatchEmbedEncoder::new(cfg.encoder, params.encoder.clone())?;
    run_with_encoder(img, cfg, &encoder, &params.dem, &params.projector)
}

/// Token and FLOP accounting for one input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetReport {
    pub n_w: usize,
    pub n_h: usize,
    /// Sub-images produced by the cropping module (both perspectives).
    pub n_sub_images: usize,
    /// Encoder invocations per forward pass (adds one when the
    /// low-resolution branch is enabled).
    pub encoder_calls: usize,
    /// Cells in each recombined high-resolution grid.
    pub tokens_before_pool: usize,
    /// Tokens handed to the projector, independent of input resolution.
    pub tokens_final: usize,
    /// Approximate FLOPs of the attention products (logits plus mixing) for
    /// one enhancement direction: `2 * N * (w_l*h_l)^2 * d * 2`.
    pub attn_flops_per_direction: u64,
    /// Both directions.
    pub attn_flops_total: u64,
}

/// Evaluate the budget formulas for an input of `img_w x img_h`.
pub fn budget(img_w: usize, img_h: usize, cfg: &PipelineConfig) -> Result<BudgetReport> {
    cfg.validate()?;
    let spec = &cfg.encoder;
    let grid = GridSpec::new(img_w, img_h, spec.input_w(), spec.input_h())?;
    let n = grid.sub_count();
    let tokens = spec.token_count();
    let per_direction = 2 * (n as u64) * (tokens as u64) * (tokens as u64) * (spec.dim() as u64) * 2;
    Ok(BudgetReport {
        n_w: grid.n_w(),
        n_h: grid.n_h(),
        n_sub_images: 2 * n,
        encoder_calls: 2 * n + usize::from(cfg.multires.is_some()),
        tokens_before_pool: n * tokens,
        tokens_final: tokens,
        attn_flops_per_direction: per_direction,
        attn_flops_total: 2 * per_direction,
    })
}
