//! Dual-perspective enhancement: feature-level re-cropping, paired
//! cross-attention in both directions, fusion of the two enhanced grids, and
//! the pooling step that restores the base token budget.
//!
//! Attention is single-head and bare — no residual connection, no
//! normalization layer — so every intermediate has a closed form that the
//! tests can pin down. Instead of attending across the full high-resolution
//! grids (quadratic in the full token count), each direction re-crops both
//! grids into N aligned sub-grids and attends within each pair.

pub mod graph;

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::geometry::{
    global_crop, global_recombine, local_crop, local_recombine, GridSpec, Perspective, SubImageSet,
};
use crate::rng::Rng;
use crate::tensor::{self, LinearParams, Tensor};

/// Query/key/value projections for one enhancement direction, each `d x d`
/// with no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

impl AttentionParams {
    fn init(dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        AttentionParams {
            query: LinearParams::init_normal(dim, dim, std, false, rng),
            key: LinearParams::init_normal(dim, dim, std, false, rng),
            value: LinearParams::init_normal(dim, dim, std, false, rng),
        }
    }

    fn zeros(dim: usize) -> Self {
        let zero = || LinearParams {
            weight: Tensor::zeros(vec![dim, dim]),
            bias: None,
        };
        AttentionParams {
            query: zero(),
            key: zero(),
            value: zero(),
        }
    }
}

/// How the two enhanced grids are merged into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    /// Project each grid to `d/2` channels and concatenate (the default).
    LinearConcat,
    Addition,
    /// Two learnable scalars, softmax-normalized.
    WeightedAddition,
    Multiplication,
    /// Elementwise maximum.
    Maxpool,
    /// Channel-concat to `2d`, then a 3x3 same-padded convolution back to `d`.
    Conv3x3,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 6] = [
        FusionVariant::LinearConcat,
        FusionVariant::Addition,
        FusionVariant::WeightedAddition,
        FusionVariant::Multiplication,
        FusionVariant::Maxpool,
        FusionVariant::Conv3x3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionVariant::LinearConcat => "linear_concat",
            FusionVariant::Addition => "addition",
            FusionVariant::WeightedAddition => "weighted_addition",
            FusionVariant::Multiplication => "multiplication",
            FusionVariant::Maxpool => "maxpool",
            FusionVariant::Conv3x3 => "conv3x3",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// All learnable state of the enhancement module. The two directions hold
/// independent projections; callers that want shared weights clone one branch
/// into the other.
#[derive(Debug, Clone, PartialEq)]
pub struct DemParams {
    pub dim: usize,
    pub glo: AttentionParams,
    pub loc: AttentionParams,
    /// `d x d/2` projection applied to the global-enhanced grid before concat.
    pub fuse_glo: LinearParams,
    /// `d x d/2` projection applied to the local-enhanced grid before concat.
    pub fuse_loc: LinearParams,
    pub variant: FusionVariant,
    /// Pre-softmax mixing logits, present only for `WeightedAddition`.
    pub weighted_logits: Option<Tensor>,
    /// `(9*2d) x d` kernel (im2col layout) plus bias, present only for `Conv3x3`.
    pub conv: Option<LinearParams>,
}

impl DemParams {
    /// Draw parameters in a fixed order from the seeded generator: global
    /// q/k/v, local q/k/v, both fusion projections, then variant extras.
    /// Weights are normal with standard deviation `1/sqrt(dim)`; the
    /// weighted-addition logits start at zero (equal mixing).
    pub fn init(dim: usize, variant: FusionVariant, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::shape(
                "DemParams::init",
                format!("feature dim must be even and >= 2, got {}", dim),
            ));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let glo = AttentionParams::init(dim, rng);
        let loc = AttentionParams::init(dim, rng);
        let fuse_glo = LinearParams::init_normal(dim, dim / 2, std, false, rng);
        let fuse_loc = LinearParams::init_normal(dim, dim / 2, std, false, rng);
        let weighted_logits = matches!(variant, FusionVariant::WeightedAddition)
            .then(|| Tensor::zeros(vec![1, 2]));
        let conv = matches!(variant, FusionVariant::Conv3x3)
            .then(|| LinearParams::init_normal(9 * 2 * dim, dim, std, true, rng));
        Ok(DemParams {
            dim,
            glo,
            loc,
            fuse_glo,
            fuse_loc,
            variant,
            weighted_logits,
            conv,
        })
    }

    /// Like [`DemParams::init`] but with the local branch sharing the global
    /// branch's projections.
    pub fn init_shared_branches(dim: usize, variant: FusionVariant, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::init(dim, variant, rng)?;
        p.loc = p.glo.clone();
        Ok(p)
    }

    /// All-zero parameters (useful for closed-form tests).
    pub fn zeros(dim: usize, variant: FusionVariant) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::shape(
                "DemParams::zeros",
                format!("feature dim must be even and >= 2, got {}", dim),
            ));
        }
        let zero_linear = |d_in: usize, d_out: usize, bias: bool| LinearParams {
            weight: Tensor::zeros(vec![d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(vec![d_out])),
        };
        Ok(DemParams {
            dim,
            glo: AttentionParams::zeros(dim),
            loc: AttentionParams::zeros(dim),
            fuse_glo: zero_linear(dim, dim / 2, false),
            fuse_loc: zero_linear(dim, dim / 2, false),
            variant,
            weighted_logits: matches!(variant, FusionVariant::WeightedAddition)
                .then(|| Tensor::zeros(vec![1, 2])),
            conv: matches!(variant, FusionVariant::Conv3x3)
                .then(|| zero_linear(9 * 2 * dim, dim, true)),
        })
    }

    /// Canonical `(name, shape)` layout of the flattened parameter vector.
    pub fn layout(dim: usize, variant: FusionVariant) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for branch in ["glo", "loc"] {
            for role in ["query", "key", "value"] {
                out.push((format!("dem.{branch}.{role}"), vec![dim, dim]));
            }
        }
        out.push(("dem.fuse.glo".to_string(), vec![dim, dim / 2]));
        out.push(("dem.fuse.loc".to_string(), vec![dim, dim / 2]));
        match variant {
            FusionVariant::WeightedAddition => {
                out.push(("dem.weighted.logits".to_string(), vec![1, 2]));
            }
            FusionVariant::Conv3x3 => {
                out.push(("dem.conv.weight".to_string(), vec![9 * 2 * dim, dim]));
                out.push(("dem.conv.bias".to_string(), vec![dim]));
            }
            _ => {}
        }
        out
    }

    /// Concatenate every parameter tensor in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for branch in [&self.glo, &self.loc] {
            for p in [&branch.query, &branch.key, &branch.value] {
                out.extend_from_slice(p.weight.data());
            }
        }
        out.extend_from_slice(self.fuse_glo.weight.data());
        out.extend_from_slice(self.fuse_loc.weight.data());
        if let Some(w) = &self.weighted_logits {
            out.extend_from_slice(w.data());
        }
        if let Some(conv) = &self.conv {
            out.extend_from_slice(conv.weight.data());
            out.extend_from_slice(conv.bias.as_ref().expect("conv bias").data());
        }
        out
    }

    /// Rebuild parameters from a flat vector in layout order.
    pub fn from_flat(dim: usize, variant: FusionVariant, theta: &[f64]) -> Result<Self> {
        let layout = Self::layout(dim, variant);
        let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if theta.len() != total {
            return Err(Error::shape(
                "DemParams::from_flat",
                format!("layout wants {} values, got {}", total, theta.len()),
            ));
        }
        let mut cursor = 0;
        let mut next = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.to_vec(), theta[cursor..cursor + n].to_vec())?;
            cursor += n;
            Ok(t)
        };
        let branch = |take: &mut dyn FnMut(&[usize]) -> Result<Tensor>| -> Result<AttentionParams> {
            Ok(AttentionParams {
                query: LinearParams::new(take(&[dim, dim])?, None)?,
                key: LinearParams::new(take(&[dim, dim])?, None)?,
                value: LinearParams::new(take(&[dim, dim])?, None)?,
            })
        };
        let glo = branch(&mut next)?;
        let loc = branch(&mut next)?;
        let fuse_glo = LinearParams::new(next(&[dim, dim / 2])?, None)?;
        let fuse_loc = LinearParams::new(next(&[dim, dim / 2])?, None)?;
        let weighted_logits = match variant {
            FusionVariant::WeightedAddition => Some(next(&[1, 2])?),
            _ => None,
        };
        let conv = match variant {
            FusionVariant::Conv3x3 => Some(LinearParams::new(
                next(&[9 * 2 * dim, dim])?,
                Some(next(&[dim])?),
            )?),
            _ => None,
        };
        Ok(DemParams {
            dim,
            glo,
            loc,
            fuse_glo,
            fuse_loc,
            variant,
            weighted_logits,
            conv,
        })
    }
}

/// Everything the enhancement module produces for one input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedFeatures {
    /// Globally-enhanced grid, `h_h x w_h x d`.
    pub v_glo: FeatureGrid,
    /// Locally-enhanced grid, `h_h x w_h x d`.
    pub v_loc: FeatureGrid,
    /// Fused grid, `h_h x w_h x d`.
    pub v_dual: FeatureGrid,
    /// Pooled grid, `h_l x w_l x d`.
    pub f_dual: FeatureGrid,
}

fn check_pair(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    dim: usize,
    op: &'static str,
) -> Result<()> {
    for (name, f) in [("global", f_glo), ("local", f_loc)] {
        if f.h() != grid.img_h() || f.w() != grid.img_w() || f.dim() != dim {
            return Err(Error::shape(
                op,
                format!(
                    "{} grid is {}x{}x{}, expected {}x{}x{}",
                    name,
                    f.w(),
                    f.h(),
                    f.dim(),
                    grid.img_w(),
                    grid.img_h(),
                    dim
                ),
            ));
        }
    }
    Ok(())
}

/// One cross-attention pass over a pair of aligned token matrices. Follows
/// the printed equation order: `A = softmax(q k^T / sqrt(d))`, then
/// `(A * kv_tokens) * W_v`.
fn attend(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    branch: &AttentionParams,
    dim: usize,
) -> Result<(Tensor, Tensor)> {
    let q = tensor::linear(q_tokens, &branch.query)?;
    let k = tensor::linear(kv_tokens, &branch.key)?;
    let logits = tensor::matmul(&q, &tensor::transpose(&k)?)?;
    let attn = tensor::softmax_rows(&tensor::scale(&logits, 1.0 / (dim as f64).sqrt())?)?;
    let mixed = tensor::matmul(&attn, kv_tokens)?;
    let out = tensor::linear(&mixed, &branch.value)?;
    Ok((attn, out))
}

fn enhance(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
    direction: Perspective,
) -> Result<(Vec<Tensor>, FeatureGrid)> {
    let op = match direction {
        Perspective::Global => "global_enhance",
        Perspective::Local => "local_enhance",
    };
    check_pair(f_glo, f_loc, grid, params.dim, op)?;
    let (g_subs, l_subs) = match direction {
        Perspective::Global => (global_crop(f_glo, grid)?, global_crop(f_loc, grid)?),
        Perspective::Local => (local_crop(f_glo, grid)?, local_crop(f_loc, grid)?),
    };
    let branch = match direction {
        Perspective::Global => &params.glo,
        Perspective::Local => &params.loc,
    };
    let mut maps = Vec::with_capacity(grid.sub_count());
    let mut enhanced = Vec::with_capacity(grid.sub_count());
    for (g_sub, l_sub) in g_subs.items().iter().zip(l_subs.items()) {
        let g_tokens = g_sub.tokens();
        let l_tokens = l_sub.tokens();
        let (attn, out_tokens) = match direction {
            // Global enhancement: queries from the global grid, keys and
            // values from the local grid.
            Perspective::Global => attend(&g_tokens, &l_tokens, branch, params.dim)?,
            // Local enhancement: roles swapped.
            Perspective::Local => attend(&l_tokens, &g_tokens, branch, params.dim)?,
        };
        maps.push(attn);
        enhanced.push(FeatureGrid::from_tokens(grid.enc_h(), grid.enc_w(), &out_tokens)?);
    }
    let set = SubImageSet::new(*grid, direction, enhanced)?;
    let combined = match direction {
        Perspective::Global => global_recombine(&set)?,
        Perspective::Local => local_recombine(&set)?,
    };
    Ok((maps, combined))
}

/// Global-perspective enhancement: re-crop both grids globally, let each
/// global sub-grid attend over its aligned local sub-grid, recombine.
pub fn global_enhance(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
) -> Result<FeatureGrid> {
    Ok(enhance(f_glo, f_loc, grid, params, Perspective::Global)?.1)
}

/// Local-perspective enhancement: re-crop both grids locally, let each local
/// sub-grid attend over its aligned global sub-grid, recombine.
pub fn local_enhance(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
) -> Result<FeatureGrid> {
    Ok(enhance(f_glo, f_loc, grid, params, Perspective::Local)?.1)
}

/// The per-sub-image attention maps computed by the chosen enhancement
/// direction, for verification.
pub fn attention_maps(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
    direction: Perspective,
) -> Result<Vec<Tensor>> {
    Ok(enhance(f_glo, f_loc, grid, params, direction)?.0)
}

/// Flatten a `h x w x c` tensor into the `(h*w) x (9*c)` im2col matrix of a
/// 3x3 same-padded convolution: per cell, the nine neighbor cells in
/// `(dy, dx)` row-major order, zeros outside the grid.
pub(crate) fn im2col_3x3(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        let base = (ny as usize * w + nx as usize) * c;
                        data.extend_from_slice(&t.data()[base..base + c]);
                    } else {
                        data.extend(std::iter::repeat(0.0).take(c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![h * w, 9 * c], data).expect("im2col shape")
}

/// Merge the two enhanced grids according to the configured fusion variant.
pub fn fuse(v_glo: &FeatureGrid, v_loc: &FeatureGrid, params: &DemParams) -> Result<FeatureGrid> {
    if v_glo.h() != v_loc.h() || v_glo.w() != v_loc.w() || v_glo.dim() != v_loc.dim() {
        return Err(Error::shape(
            "fuse",
            format!(
                "grids differ: {}x{}x{} vs {}x{}x{}",
                v_glo.w(),
                v_glo.h(),
                v_glo.dim(),
                v_loc.w(),
                v_loc.h(),
                v_loc.dim()
            ),
        ));
    }
    if v_glo.dim() != params.dim {
        return Err(Error::shape(
            "fuse",
            format!("grid dim {} does not match params dim {}", v_glo.dim(), params.dim),
        ));
    }
    let (h, w, d) = (v_glo.h(), v_glo.w(), v_glo.dim());
    match params.variant {
        FusionVariant::LinearConcat => {
            let tg = tensor::linear(&v_glo.tokens(), &params.fuse_glo)?;
            let tl = tensor::linear(&v_loc.tokens(), &params.fuse_loc)?;
            FeatureGrid::from_tokens(h, w, &tensor::concat_cols(&tg, &tl)?)
        }
        FusionVariant::Addition => {
            FeatureGrid::new(h, w, d, tensor::add(v_glo.tensor(), v_loc.tensor())?)
        }
        FusionVariant::WeightedAddition => {
            let logits = params.weighted_logits.as_ref().ok_or_else(|| {
                Error::shape("fuse", "weighted_addition selected but logits missing".to_string())
            })?;
            let weights = tensor::softmax_rows(logits)?;
            let a = tensor::scale(v_glo.tensor(), weights.data()[0])?;
            let b = tensor::scale(v_loc.tensor(), weights.data()[1])?;
            FeatureGrid::new(h, w, d, tensor::add(&a, &b)?)
        }
        FusionVariant::Multiplication => {
            FeatureGrid::new(h, w, d, tensor::mul(v_glo.tensor(), v_loc.tensor())?)
        }
        FusionVariant::Maxpool => {
            FeatureGrid::new(h, w, d, tensor::emax(v_glo.tensor(), v_loc.tensor())?)
        }
        FusionVariant::Conv3x3 => {
            let conv = params.conv.as_ref().ok_or_else(|| {
                Error::shape("fuse", "conv3x3 selected but kernel missing".to_string())
            })?;
            let cat = tensor::concat_cols(&v_glo.tokens(), &v_loc.tokens())?;
            let stacked = cat.reshape(vec![h, w, 2 * d])?;
            let cols = im2col_3x3(&stacked);
            FeatureGrid::from_tokens(h, w, &tensor::linear(&cols, conv)?)
        }
    }
}

/// Average-pool the fused grid with kernel `(n_h, n_w)`, restoring the
/// per-sub-image token count.
pub fn dual_pool(v_dual: &FeatureGrid, grid: &GridSpec) -> Result<FeatureGrid> {
    if v_dual.h() != grid.img_h() || v_dual.w() != grid.img_w() {
        return Err(Error::shape(
            "dual_pool",
            format!(
                "grid is {}x{}, expected {}x{}",
                v_dual.w(),
                v_dual.h(),
                grid.img_w(),
                grid.img_h()
            ),
        ));
    }
    let pooled = tensor::avg_pool(v_dual.tensor(), grid.n_h(), grid.n_w())?;
    FeatureGrid::new(grid.enc_h(), grid.enc_w(), v_dual.dim(), pooled)
}

/// Elementwise sum of a low-resolution feature grid and the pooled
/// dual-enhanced grid (the multi-resolution combination).
pub fn multires_combine(f_low: &FeatureGrid, f_dual: &FeatureGrid) -> Result<FeatureGrid> {
    FeatureGrid::new(
        f_dual.h(),
        f_dual.w(),
        f_dual.dim(),
        tensor::add(f_low.tensor(), f_dual.tensor())?,
    )
}

/// Run the full enhancement module: both directions, fusion, pooling.
pub fn run_dem(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
) -> Result<EnhancedFeatures> {
    let v_glo = global_enhance(f_glo, f_loc, grid, params)?;
    let v_loc = local_enhance(f_glo, f_loc, grid, params)?;
    let v_dual = fuse(&v_glo, &v_loc, params)?;
    let f_dual = dual_pool(&v_dual, grid)?;
    Ok(EnhancedFeatures {
        v_glo,
        v_loc,
        v_dual,
        f_dual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CellGrid;

    fn random_grid(h: usize, w: usize, d: usize, rng: &mut Rng) -> FeatureGrid {
        FeatureGrid::new(h, w, d, Tensor::randn(vec![h, w, d], 1.0, rng)).unwrap()
    }

    #[test]
    fn zero_query_gives_uniform_attention_and_mean_values() {
        // Grid 1x1 (N=1): one cross-attention over the whole grid. With
        // W_q = 0 the logits vanish, so every output token is mean(L) * W_v.
        let mut rng = Rng::new(3);
        let d = 4;
        let grid = GridSpec::new(2, 2, 2, 2).unwrap();
        let f_glo = random_grid(2, 2, d, &mut rng);
        let f_loc = random_grid(2, 2, d, &mut rng);
        let mut params = DemParams::init(d, FusionVariant::LinearConcat, &mut rng).unwrap();
        params.glo.query.weight = Tensor::zeros(vec![d, d]);

        let maps = attention_maps(&f_glo, &f_loc, &grid, &params, Perspective::Global).unwrap();
        assert_eq!(maps.len(), 1);
        for &a in maps[0].data() {
            assert!((a - 0.25).abs() < 1e-12);
        }

        let v = global_enhance(&f_glo, &f_loc, &grid, &params).unwrap();
        let mut mean = vec![0.0; d];
        for t in 0..4 {
            for c in 0..d {
                mean[c] += f_loc.tokens().data()[t * d + c] / 4.0;
            }
        }
        let mean_t = Tensor::new(vec![1, d], mean).unwrap();
        let want = tensor::linear(&mean_t, &params.glo.value).unwrap();
        for t in 0..4 {
            for c in 0..d {
                assert!((v.tokens().data()[t * d + c] - want.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_subgrids_reduce_to_value_projection() {
        // w_l = h_l = 1: each attention map is [[1]], so the global direction
        // returns L * W_v and the local direction returns G * W_v, cell-wise.
        let mut rng = Rng::new(6);
        let d = 4;
        let grid = GridSpec::new(2, 2, 1, 1).unwrap();
        let f_glo = random_grid(2, 2, d, &mut rng);
        let f_loc = random_grid(2, 2, d, &mut rng);
        let params = DemParams::init(d, FusionVariant::LinearConcat, &mut rng).unwrap();

        for maps in [
            attention_maps(&f_glo, &f_loc, &grid, &params, Perspective::Global).unwrap(),
            attention_maps(&f_glo, &f_loc, &grid, &params, Perspective::Local).unwrap(),
        ] {
            assert_eq!(maps.len(), 4);
            for m in maps {
                assert_eq!(m.shape(), &[1, 1]);
                assert!((m.data()[0] - 1.0).abs() < 1e-15);
            }
        }

        let v = global_enhance(&f_glo, &f_loc, &grid, &params).unwrap();
        let want = tensor::linear(&f_loc.tokens(), &params.glo.value).unwrap();
        for (g, w) in v.tokens().data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let v = local_enhance(&f_glo, &f_loc, &grid, &params).unwrap();
        let want = tensor::linear(&f_glo.tokens(), &params.loc.value).unwrap();
        for (g, w) in v.tokens().data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn directions_agree_under_full_symmetry() {
        // Same input grid on both sides plus shared branch parameters makes
        // the two directions identical on a 1x1 grid.
        let mut rng = Rng::new(9);
        let d = 6;
        let grid = GridSpec::new(3, 2, 3, 2).unwrap();
        let f = random_grid(2, 3, d, &mut rng);
        let params = DemParams::init_shared_branches(d, FusionVariant::Addition, &mut rng).unwrap();
        let a = global_enhance(&f, &f, &grid, &params).unwrap();
        let b = local_enhance(&f, &f, &grid, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn enhancement_matches_naive_oracle() {
        let mut rng = Rng::new(12);
        let d = 4;
        let grid = GridSpec::new(4, 4, 2, 2).unwrap();
        let f_glo = random_grid(4, 4, d, &mut rng);
        let f_loc = random_grid(4, 4, d, &mut rng);
        let params = DemParams::init(d, FusionVariant::LinearConcat, &mut rng).unwrap();
        for direction in [Perspective::Global, Perspective::Local] {
            let got = enhance(&f_glo, &f_loc, &grid, &params, direction).unwrap().1;
            let want = crate::naive::enhance_reference(&f_glo, &f_loc, &grid, &params, direction);
            for (g, w) in got.tensor().data().iter().zip(want.tensor().data()) {
                assert!((g - w).abs() < 1e-10, "direction {:?}", direction);
            }
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let mut rng = Rng::new(15);
        let d = 8;
        let grid = GridSpec::new(6, 4, 3, 2).unwrap();
        let f_glo = random_grid(4, 6, d, &mut rng);
        let f_loc = random_grid(4, 6, d, &mut rng);
        let params = DemParams::init(d, FusionVariant::LinearConcat, &mut rng).unwrap();
        for direction in [Perspective::Global, Perspective::Local] {
            for map in attention_maps(&f_glo, &f_loc, &grid, &params, direction).unwrap() {
                let (rows, cols) = (map.shape()[0], map.shape()[1]);
                for r in 0..rows {
                    let sum: f64 = map.data()[r * cols..(r + 1) * cols].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn locality_of_global_enhancement() {
        // Perturbing one cell of the local grid may only change output cells
        // that recombine from the same global sub-image.
        let mut rng = Rng::new(21);
        let d = 4;
        let grid = GridSpec::new(4, 4, 2, 2).unwrap();
        let f_glo = random_grid(4, 4, d, &mut rng);
        let f_loc = random_grid(4, 4, d, &mut rng);
        let params = DemParams::init(d, FusionVariant::LinearConcat, &mut rng).unwrap();
        let base = global_enhance(&f_glo, &f_loc, &grid, &params).unwrap();

        let (px, py) = (1, 2); // perturbed cell
        let touched_sub = (py % grid.n_h()) * grid.n_w() + (px % grid.n_w());
        let mut data = f_loc.tensor().data().to_vec();
        data[(py * 4 + px) * d] += 1.0;
        let f_loc2 =
            FeatureGrid::new(4, 4, d, Tensor::new(vec![4, 4, d], data).unwrap()).unwrap();
        let bumped = global_enhance(&f_glo, &f_loc2, &grid, &params).unwrap();

        for y in 0..4 {
            for x in 0..4 {
                let sub = (y % grid.n_h()) * grid.n_w() + (x % grid.n_w());
                let changed = (0..d).any(|c| {
                    let i = (y * 4 + x) * d + c;
                    base.tensor().data()[i] != bumped.tensor().data()[i]
                });
                if sub != touched_sub {
                    assert!(!changed, "cell ({}, {}) outside sub {} changed", x, y, touched_sub);
                }
            }
        }
    }

    #[test]
    fn fuse_linear_concat_selector_weights() {
        // d = 2 with both projections picking channel 0: the fused channels
        // are (v_glo ch0, v_loc ch0).
        let d = 2;
        let mut params = DemParams::zeros(d, FusionVariant::LinearConcat).unwrap();
        let selector = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        params.fuse_glo = LinearParams::new(selector.clone(), None).unwrap();
        params.fuse_loc = LinearParams::new(selector, None).unwrap();
        let mut rng = Rng::new(2);
        let vg = random_grid(2, 3, d, &mut rng);
        let vl = random_grid(2, 3, d, &mut rng);
        let fused = fuse(&vg, &vl, &params).unwrap();
        for cell in 0..6 {
            assert_eq!(fused.tokens().data()[cell * 2], vg.tokens().data()[cell * 2]);
            assert_eq!(fused.tokens().data()[cell * 2 + 1], vl.tokens().data()[cell * 2]);
        }
    }

    #[test]
    fn fuse_addition_cancels_opposites() {
        let mut rng = Rng::new(4);
        let vg = random_grid(2, 2, 4, &mut rng);
        let neg = tensor::scale(vg.tensor(), -1.0).unwrap();
        let vl = FeatureGrid::new(2, 2, 4, neg).unwrap();
        let params = DemParams::zeros(4, FusionVariant::Addition).unwrap();
        let fused = fuse(&vg, &vl, &params).unwrap();
        assert!(fused.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_weighted_addition_equal_logits_is_mean() {
        let mut rng = Rng::new(5);
        let vg = random_grid(2, 2, 4, &mut rng);
        let vl = random_grid(2, 2, 4, &mut rng);
        let params = DemParams::zeros(4, FusionVariant::WeightedAddition).unwrap();
        let fused = fuse(&vg, &vl, &params).unwrap();
        for i in 0..fused.tensor().numel() {
            let want = 0.5 * (vg.tensor().data()[i] + vl.tensor().data()[i]);
            assert!((fused.tensor().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_elementwise_variants() {
        let mut rng = Rng::new(6);
        let vg = random_grid(2, 2, 2, &mut rng);
        let vl = random_grid(2, 2, 2, &mut rng);
        let mult = fuse(&vg, &vl, &DemParams::zeros(2, FusionVariant::Multiplication).unwrap())
            .unwrap();
        let maxed = fuse(&vg, &vl, &DemParams::zeros(2, FusionVariant::Maxpool).unwrap()).unwrap();
        for i in 0..8 {
            let (a, b) = (vg.tensor().data()[i], vl.tensor().data()[i]);
            assert_eq!(mult.tensor().data()[i], a * b);
            assert_eq!(maxed.tensor().data()[i], a.max(b));
        }
    }

    #[test]
    fn fuse_conv3x3_shape_and_zero_input() {
        let mut rng = Rng::new(7);
        let d = 4;
        let params = DemParams::init(d, FusionVariant::Conv3x3, &mut rng).unwrap();
        let vg = random_grid(3, 5, d, &mut rng);
        let vl = random_grid(3, 5, d, &mut rng);
        let fused = fuse(&vg, &vl, &params).unwrap();
        assert_eq!(fused.tensor().shape(), &[3, 5, d]);
        // Zero input leaves only the bias.
        let zg = FeatureGrid::zeros(3, 5, d);
        let fused = fuse(&zg, &zg, &params).unwrap();
        let bias = params.conv.as_ref().unwrap().bias.as_ref().unwrap();
        for cell in 0..15 {
            for c in 0..d {
                assert_eq!(fused.tokens().data()[cell * d + c], bias.data()[c]);
            }
        }
    }

    #[test]
    fn fuse_rejects_mismatched_grids() {
        let params = DemParams::zeros(4, FusionVariant::Addition).unwrap();
        let a = FeatureGrid::zeros(2, 2, 4);
        let b = FeatureGrid::zeros(2, 3, 4);
        assert!(fuse(&a, &b, &params).is_err());
    }

    #[test]
    fn unknown_variant_name_is_rejected() {
        let err = "concat_linear".parse::<FusionVariant>().unwrap_err();
        assert_eq!(err, Error::UnknownVariant("concat_linear".to_string()));
        for v in FusionVariant::ALL {
            assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
        }
    }

    #[test]
    fn dual_pool_shapes_and_identity() {
        let mut rng = Rng::new(8);
        // 1x1 grid: pooling is the identity.
        let grid = GridSpec::new(3, 2, 3, 2).unwrap();
        let v = random_grid(2, 3, 4, &mut rng);
        assert_eq!(dual_pool(&v, &grid).unwrap(), v);
        // Constant grid pools to the same constant at reduced size.
        let grid = GridSpec::new(6, 6, 2, 2).unwrap();
        let c = FeatureGrid::new(6, 6, 2, Tensor::filled(vec![6, 6, 2], 1.25)).unwrap();
        let pooled = dual_pool(&c, &grid).unwrap();
        assert_eq!(pooled.tensor().shape(), &[2, 2, 2]);
        assert!(pooled.tensor().data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn dual_pool_matches_window_oracle_on_3x3_grid() {
        // 72x72 grid with a 3x3 tile layout pools down to 24x24.
        let mut rng = Rng::new(10);
        let grid = GridSpec::new(72, 72, 24, 24).unwrap();
        let v = random_grid(72, 72, 2, &mut rng);
        let got = dual_pool(&v, &grid).unwrap();
        assert_eq!(got.tensor().shape(), &[24, 24, 2]);
        let want = crate::naive::avg_pool_reference(v.tensor(), 3, 3);
        for (g, w) in got.tensor().data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn multires_combine_is_commutative_elementwise_sum() {
        let mut rng = Rng::new(11);
        let a = random_grid(2, 2, 4, &mut rng);
        let b = random_grid(2, 2, 4, &mut rng);
        let zero = FeatureGrid::zeros(2, 2, 4);
        assert_eq!(multires_combine(&zero, &a).unwrap(), a);
        assert_eq!(
            multires_combine(&a, &b).unwrap(),
            multires_combine(&b, &a).unwrap()
        );
        let got = multires_combine(&a, &b).unwrap();
        for i in 0..16 {
            assert_eq!(got.tensor().data()[i], a.tensor().data()[i] + b.tensor().data()[i]);
        }
    }

    #[test]
    fn run_dem_shape_contract() {
        let mut rng = Rng::new(13);
        let d = 8;
        let grid = GridSpec::new(6, 4, 3, 2).unwrap();
        let f_glo = random_grid(4, 6, d, &mut rng);
        let f_loc = random_grid(4, 6, d, &mut rng);
        for variant in FusionVariant::ALL {
            let params = DemParams::init(d, variant, &mut rng).unwrap();
            let out = run_dem(&f_glo, &f_loc, &grid, &params).unwrap();
            assert_eq!(out.v_glo.tensor().shape(), &[4, 6, d]);
            assert_eq!(out.v_loc.tensor().shape(), &[4, 6, d]);
            assert_eq!(out.v_dual.tensor().shape(), &[4, 6, d]);
            assert_eq!(out.f_dual.tensor().shape(), &[2, 3, d]);
        }
    }

    #[test]
    fn params_flatten_round_trip() {
        let mut rng = Rng::new(14);
        for variant in FusionVariant::ALL {
            let p = DemParams::init(4, variant, &mut rng).unwrap();
            let theta = p.flatten();
            let total: usize = DemParams::layout(4, variant)
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            assert_eq!(theta.len(), total);
            let q = DemParams::from_flat(4, variant, &theta).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn feature_crop_recovers_encoder_outputs() {
        // Recombining encoder outputs globally and re-cropping globally gives
        // back the original per-sub-image features, item by item.
        let mut rng = Rng::new(16);
        let grid = GridSpec::new(4, 4, 2, 2).unwrap();
        let items: Vec<FeatureGrid> = (0..4).map(|_| random_grid(2, 2, 4, &mut rng)).collect();
        let set = SubImageSet::new(grid, Perspective::Global, items.clone()).unwrap();
        let f_glo = global_recombine(&set).unwrap();
        let again = global_crop(&f_glo, &grid).unwrap();
        assert_eq!(again.items(), &items[..]);
    }
}
