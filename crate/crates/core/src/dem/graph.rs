//! Tape construction of the enhancement module for gradient checking.
//!
//! Rebuilds the exact forward computation of [`run_dem`](super::run_dem) on
//! the autodiff graph — same kernels, same operation order — with every
//! parameter tensor as a leaf, so reverse-mode gradients of
//! `sum(pooled output)` can be compared against central differences of the
//! plain forward path.

use crate::autodiff::{grad_check, Graph, NodeId};
use crate::dem::{DemParams, FusionVariant};
use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::geometry::{sub_cell_indices, GridSpec, Perspective};
use crate::tensor::Tensor;

/// The assembled loss graph: scalar loss, pooled output, and the parameter
/// leaves in [`DemParams::layout`] order.
pub struct DemGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub pooled: NodeId,
    pub params: Vec<NodeId>,
}

/// Row permutation that rebuilds the full grid from vertically stacked
/// per-sub-image token matrices.
fn recombine_indices(grid: &GridSpec, perspective: Perspective) -> Vec<usize> {
    let tokens = grid.enc_w() * grid.enc_h();
    let mut idx = Vec::with_capacity(grid.img_w() * grid.img_h());
    for y in 0..grid.img_h() {
        for x in 0..grid.img_w() {
            let (sub, u, v) = match perspective {
                Perspective::Global => (
                    (y % grid.n_h()) * grid.n_w() + (x % grid.n_w()),
                    x / grid.n_w(),
                    y / grid.n_h(),
                ),
                Perspective::Local => (
                    (y / grid.enc_h()) * grid.n_w() + (x / grid.enc_w()),
                    x % grid.enc_w(),
                    y % grid.enc_h(),
                ),
            };
            idx.push(sub * tokens + v * grid.enc_w() + u);
        }
    }
    idx
}

/// Gather indices of a 3x3 same-padded neighborhood over an `h x w` grid,
/// with out-of-bounds cells pointing at the extra zero row `h * w`.
fn im2col_indices(h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * 9);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        idx.push(ny as usize * w + nx as usize);
                    } else {
                        idx.push(h * w);
                    }
                }
            }
        }
    }
    idx
}

fn one_direction(
    g: &mut Graph,
    f_glo: NodeId,
    f_loc: NodeId,
    grid: &GridSpec,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    dim: usize,
    direction: Perspective,
) -> Result<NodeId> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut outs = Vec::with_capacity(grid.sub_count());
    for sub in 0..grid.sub_count() {
        let idx = sub_cell_indices(grid, direction, sub);
        let g_sub = g.gather_rows(f_glo, idx.clone())?;
        let l_sub = g.gather_rows(f_loc, idx)?;
        let (q_src, kv_src) = match direction {
            Perspective::Global => (g_sub, l_sub),
            Perspective::Local => (l_sub, g_sub),
        };
        let q = g.matmul(q_src, wq)?;
        let k = g.matmul(kv_src, wk)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let scaled = g.scale(logits, scale)?;
        let attn = g.softmax_rows(scaled)?;
        let mixed = g.matmul(attn, kv_src)?;
        outs.push(g.matmul(mixed, wv)?);
    }
    let stacked = g.concat_rows(&outs)?;
    g.gather_rows(stacked, recombine_indices(grid, direction))
}

/// Build `sum(dual_pool(fuse(global_enhance, local_enhance)))` on the tape,
/// with `theta` laid out per [`DemParams::layout`].
pub fn build_dem_loss(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    dim: usize,
    variant: FusionVariant,
    theta: &[f64],
) -> Result<DemGraph> {
    let layout = DemParams::layout(dim, variant);
    let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if theta.len() != total {
        return Err(Error::shape(
            "build_dem_loss",
            format!("layout wants {} values, got {}", total, theta.len()),
        ));
    }

    let mut g = Graph::new();
    let mut params = Vec::with_capacity(layout.len());
    let mut cursor = 0;
    for (_, shape) in &layout {
        let n: usize = shape.iter().product();
        let leaf = g.leaf(Tensor::new(shape.clone(), theta[cursor..cursor + n].to_vec())?);
        cursor += n;
        params.push(leaf);
    }
    // Layout order: glo q/k/v, loc q/k/v, fuse_glo, fuse_loc, variant extras.
    let (gq, gk, gv) = (params[0], params[1], params[2]);
    let (lq, lk, lv) = (params[3], params[4], params[5]);
    let (fuse_glo, fuse_loc) = (params[6], params[7]);

    let glo_tokens = g.leaf(f_glo.tokens());
    let loc_tokens = g.leaf(f_loc.tokens());

    let v_glo = one_direction(
        &mut g, glo_tokens, loc_tokens, grid, gq, gk, gv, dim, Perspective::Global,
    )?;
    let v_loc = one_direction(
        &mut g, glo_tokens, loc_tokens, grid, lq, lk, lv, dim, Perspective::Local,
    )?;

    let fused = match variant {
        FusionVariant::LinearConcat => {
            let tg = g.matmul(v_glo, fuse_glo)?;
            let tl = g.matmul(v_loc, fuse_loc)?;
            g.concat_cols(tg, tl)?
        }
        FusionVariant::Addition => g.add(v_glo, v_loc)?,
        FusionVariant::WeightedAddition => {
            let logits = params[8];
            let weights = g.softmax_rows(logits)?;
            let wt = g.transpose(weights)?;
            let w0 = g.gather_rows(wt, vec![0])?;
            let w1 = g.gather_rows(wt, vec![1])?;
            let a = g.scale_by_scalar(v_glo, w0)?;
            let b = g.scale_by_scalar(v_loc, w1)?;
            g.add(a, b)?
        }
        FusionVariant::Multiplication => g.mul(v_glo, v_loc)?,
        FusionVariant::Maxpool => g.emax(v_glo, v_loc)?,
        FusionVariant::Conv3x3 => {
            let (kernel, bias) = (params[8], params[9]);
            let cat = g.concat_cols(v_glo, v_loc)?;
            let zero_row = g.leaf(Tensor::zeros(vec![1, 2 * dim]));
            let padded = g.concat_rows(&[cat, zero_row])?;
            let gathered = g.gather_rows(padded, im2col_indices(grid.img_h(), grid.img_w()))?;
            let cols = g.reshape(gathered, vec![grid.img_h() * grid.img_w(), 9 * 2 * dim])?;
            let conv = g.matmul(cols, kernel)?;
            g.add_bias(conv, bias)?
        }
    };
    let as_grid = g.reshape(fused, vec![grid.img_h(), grid.img_w(), dim])?;
    let pooled = g.avg_pool(as_grid, grid.n_h(), grid.n_w())?;
    let loss = g.sum_all(pooled)?;
    Ok(DemGraph {
        graph: g,
        loss,
        pooled,
        params,
    })
}

/// Worst relative error between reverse-mode gradients of
/// `sum(dual_pool(fused))` and central differences, over every entry of
/// `params`.
pub fn dem_grad_check(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
    step: f64,
) -> Result<f64> {
    let theta = params.flatten();
    let build = |t: &[f64]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
        let dg = build_dem_loss(f_glo, f_loc, grid, params.dim, params.variant, t)?;
        Ok((dg.graph, dg.loss, dg.params))
    };
    grad_check(&build, &theta, step)
}
