//! Pluggable vision-encoder interface with a deterministic toy
//! patch-embedding implementation.
//!
//! The toy encoder flattens non-overlapping `p x p` patches, applies one
//! linear map, and adds a learned per-position embedding. Every sub-image is
//! encoded with the same weights and the same positional table, mirroring how
//! cropping-based pipelines reuse a single pretrained encoder. There is no
//! CLS token and no transformer stack; a real backend can implement
//! [`VisionEncoder`] behind the same contract.

use crate::error::{Error, Result};
use crate::geometry::{CellGrid, ImageTensor};
use crate::rng::Rng;
use crate::tensor::{linear, LinearParams, Tensor};

/// Input channels the toy encoder consumes.
pub const IMAGE_CHANNELS: usize = 3;

/// Encoder geometry: input resolution, patch size, and feature width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionEncoderSpec {
    input_w: usize,
    input_h: usize,
    patch: usize,
    dim: usize,
}

impl VisionEncoderSpec {
    pub fn new(input_w: usize, input_h: usize, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || input_w == 0 || input_h == 0 {
            return Err(Error::shape(
                "VisionEncoderSpec::new",
                format!("extents must be >= 1, got {}x{} patch {}", input_w, input_h, patch),
            ));
        }
        if input_w % patch != 0 {
            return Err(Error::NotDivisible {
                extent: input_w,
                kernel: patch,
            });
        }
        if input_h % patch != 0 {
            return Err(Error::NotDivisible {
                extent: input_h,
                kernel: patch,
            });
        }
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::shape(
                "VisionEncoderSpec::new",
                format!("feature dim must be even and >= 2, got {}", dim),
            ));
        }
        Ok(VisionEncoderSpec {
            input_w,
            input_h,
            patch,
            dim,
        })
    }

    pub fn input_w(&self) -> usize {
        self.input_w
    }

    pub fn input_h(&self) -> usize {
        self.input_h
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feature cells along the width.
    pub fn tokens_w(&self) -> usize {
        self.input_w / self.patch
    }

    /// Feature cells along the height.
    pub fn tokens_h(&self) -> usize {
        self.input_h / self.patch
    }

    /// Tokens per encoded image.
    pub fn token_count(&self) -> usize {
        self.tokens_w() * self.tokens_h()
    }
}

/// Dense `h x w x dim` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    dim: usize,
    data: Tensor,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, dim: usize, data: Tensor) -> Result<Self> {
        if data.shape() != [h, w, dim] {
            return Err(Error::shape(
                "FeatureGrid::new",
                format!("tensor {:?} does not match {}x{}x{}", data.shape(), h, w, dim),
            ));
        }
        Ok(FeatureGrid { h, w, dim, data })
    }

    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        FeatureGrid {
            h,
            w,
            dim,
            data: Tensor::zeros(vec![h, w, dim]),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// View as a `(h*w) x dim` token matrix, rows in row-major `(y, x)` order.
    pub fn tokens(&self) -> Tensor {
        self.data
            .reshape(vec![self.h * self.w, self.dim])
            .expect("grid data is contiguous")
    }

    /// Rebuild a grid from a token matrix produced by [`FeatureGrid::tokens`].
    pub fn from_tokens(h: usize, w: usize, tokens: &Tensor) -> Result<Self> {
        let dim = match tokens.shape() {
            [rows, d] if *rows == h * w => *d,
            s => {
                return Err(Error::shape(
                    "FeatureGrid::from_tokens",
                    format!("token matrix {:?} does not cover {}x{} cells", s, h, w),
                ))
            }
        };
        Ok(FeatureGrid {
            h,
            w,
            dim,
            data: tokens.reshape(vec![h, w, dim])?,
        })
    }
}

impl CellGrid for FeatureGrid {
    fn rows(&self) -> usize {
        self.h
    }

    fn cols(&self) -> usize {
        self.w
    }

    fn channels(&self) -> usize {
        self.dim
    }

    fn data(&self) -> &[f64] {
        self.data.data()
    }

    fn from_parts(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(vec![rows, cols, channels], data)?;
        FeatureGrid::new(rows, cols, channels, t)
    }
}

/// Weights for the toy patch-embedding encoder: one linear map over flattened
/// patches plus a per-position embedding shared by every encoded image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedParams {
    pub proj: LinearParams,
    pub pos: Tensor,
}

impl PatchEmbedParams {
    /// Projection weight drawn normal with standard deviation `1/sqrt(dim)`,
    /// zero bias, positional table drawn with the same scheme.
    pub fn init(spec: &VisionEncoderSpec, rng: &mut Rng) -> Self {
        let d_in = spec.patch() * spec.patch() * IMAGE_CHANNELS;
        let std = 1.0 / (spec.dim() as f64).sqrt();
        PatchEmbedParams {
            proj: LinearParams::init_normal(d_in, spec.dim(), std, true, rng),
            pos: Tensor::randn(vec![spec.token_count(), spec.dim()], std, rng),
        }
    }

    pub fn zeros(spec: &VisionEncoderSpec) -> Self {
        let d_in = spec.patch() * spec.patch() * IMAGE_CHANNELS;
        PatchEmbedParams {
            proj: LinearParams {
                weight: Tensor::zeros(vec![d_in, spec.dim()]),
                bias: Some(Tensor::zeros(vec![spec.dim()])),
            },
            pos: Tensor::zeros(vec![spec.token_count(), spec.dim()]),
        }
    }
}

/// Contract for anything that turns an encoder-sized image into a feature
/// grid. External backends implement this to replace the toy encoder.
pub trait VisionEncoder {
    fn spec(&self) -> &VisionEncoderSpec;
    fn encode(&self, img: &ImageTensor) -> Result<FeatureGrid>;
}

/// The deterministic toy encoder: patch flatten, linear projection, learned
/// positional embedding.
#[derive(Debug, Clone)]
pub struct PatchEmbedEncoder {
    spec: VisionEncoderSpec,
    params: PatchEmbedParams,
}

impl PatchEmbedEncoder {
    pub fn new(spec: VisionEncoderSpec, params: PatchEmbedParams) -> Result<Self> {
        let d_in = spec.patch() * spec.patch() * IMAGE_CHANNELS;
        if params.proj.d_in() != d_in
            || params.proj.d_out() != spec.dim()
            || params.pos.shape() != [spec.token_count(), spec.dim()]
        {
            return Err(Error::shape(
                "PatchEmbedEncoder::new",
                format!(
                    "params (proj {:?}, pos {:?}) do not match spec {}x{} p{} d{}",
                    params.proj.weight.shape(),
                    params.pos.shape(),
                    spec.input_w(),
                    spec.input_h(),
                    spec.patch(),
                    spec.dim()
                ),
            ));
        }
        Ok(PatchEmbedEncoder { spec, params })
    }

    pub fn params(&self) -> &PatchEmbedParams {
        &self.params
    }

    /// Flatten every patch of `img` into a row of a `(tokens) x (p*p*c)`
    /// matrix, row-major over `(y, x, c)` within the patch.
    fn patch_matrix(&self, img: &ImageTensor) -> Tensor {
        let p = self.spec.patch();
        let c = img.channels();
        let (tw, th) = (self.spec.tokens_w(), self.spec.tokens_h());
        let mut data = Vec::with_capacity(th * tw * p * p * c);
        for ty in 0..th {
            for tx in 0..tw {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            data.push(img.at(tx * p + dx, ty * p + dy, ch));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![th * tw, p * p * c], data).expect("patch matrix shape")
    }
}

impl VisionEncoder for PatchEmbedEncoder {
    fn spec(&self) -> &VisionEncoderSpec {
        &self.spec
    }

    fn encode(&self, img: &ImageTensor) -> Result<FeatureGrid> {
        if img.width() != self.spec.input_w()
            || img.height() != self.spec.input_h()
            || img.channels() != IMAGE_CHANNELS
        {
            return Err(Error::shape(
                "encode",
                format!(
                    "image {}x{}x{} does not match encoder input {}x{}x{}",
                    img.width(),
                    img.height(),
                    img.channels(),
                    self.spec.input_w(),
                    self.spec.input_h(),
                    IMAGE_CHANNELS
                ),
            ));
        }
        let patches = self.patch_matrix(img);
        let projected = linear(&patches, &self.params.proj)?;
        let tokens = crate::tensor::add(&projected, &self.params.pos)?;
        FeatureGrid::from_tokens(self.spec.tokens_h(), self.spec.tokens_w(), &tokens)
    }
}
