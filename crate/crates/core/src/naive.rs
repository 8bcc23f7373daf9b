//! Brute-force reference implementations used by the verification suites.
//!
//! Everything here is written as plain index loops, independent of the main
//! kernels and of the geometry module, so that agreement between the two
//! paths is meaningful evidence. These functions are slow on purpose and are
//! only run on small inputs.

use crate::dem::DemParams;
use crate::encoder::FeatureGrid;
use crate::geometry::{GridSpec, Perspective};
use crate::tensor::{LinearParams, Tensor};

/// Triple-loop matrix product with the same sequential-over-k per-element
/// summation order as the main kernel (so agreement is exact), but an
/// independent loop nest.
pub fn matmul_reference(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        for i in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).expect("reference matmul shape")
}

pub fn linear_reference(x: &Tensor, p: &LinearParams) -> Tensor {
    let mut out = matmul_reference(x, &p.weight);
    if let Some(b) = &p.bias {
        let (n, d) = (out.shape()[0], out.shape()[1]);
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += b.data()[j];
            }
        }
    }
    out
}

pub fn avg_pool_reference(x: &Tensor, kh: usize, kw: usize) -> Tensor {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / kh, w / kw);
    let mut out = vec![0.0; oh * ow * d];
    for c in 0..d {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for y in oy * kh..(oy + 1) * kh {
                    for x_ in ox * kw..(ox + 1) * kw {
                        acc += x.data()[(y * w + x_) * d + c];
                    }
                }
                out[(oy * ow + ox) * d + c] = acc / (kh * kw) as f64;
            }
        }
    }
    Tensor::new(vec![oh, ow, d], out).expect("reference pool shape")
}

/// Entry-by-entry single-pair cross-attention: query tokens `q_src`, key and
/// value tokens `kv_src`, both `t x d`. Materializes the full attention map
/// with its own softmax and dot products.
pub fn cross_attention_reference(
    q_src: &[Vec<f64>],
    kv_src: &[Vec<f64>],
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    d: usize,
) -> Vec<Vec<f64>> {
    let t = q_src.len();
    let project = |tokens: &[Vec<f64>], w: &Tensor| -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|tok| {
                (0..d)
                    .map(|o| (0..d).map(|e| tok[e] * w.data()[e * d + o]).sum())
                    .collect()
            })
            .collect()
    };
    let q = project(q_src, wq);
    let k = project(kv_src, wk);
    let v = project(kv_src, wv);

    // Attention logits, softmax row by row.
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![vec![0.0; t]; t];
    for r in 0..t {
        let mut logits = vec![0.0; t];
        for s in 0..t {
            let mut dot = 0.0;
            for e in 0..d {
                dot += q[r][e] * k[s][e];
            }
            logits[s] = dot * scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        for s in 0..t {
            attn[r][s] = exps[s] / norm;
        }
    }

    (0..t)
        .map(|r| {
            (0..d)
                .map(|o| (0..t).map(|s| attn[r][s] * v[s][o]).sum())
                .collect()
        })
        .collect()
}

fn grid_token(f: &FeatureGrid, x: usize, y: usize) -> Vec<f64> {
    let d = f.dim();
    let base = (y * f.w() + x) * d;
    f.tensor().data()[base..base + d].to_vec()
}

/// Full enhancement in one direction, re-deriving the crop index sets inline
/// from the stride formulas instead of calling the geometry module.
pub fn enhance_reference(
    f_glo: &FeatureGrid,
    f_loc: &FeatureGrid,
    grid: &GridSpec,
    params: &DemParams,
    direction: Perspective,
) -> FeatureGrid {
    let (nw, nh) = (grid.n_w(), grid.n_h());
    let (wl, hl) = (grid.enc_w(), grid.enc_h());
    let d = params.dim;
    let branch = match direction {
        Perspective::Global => &params.glo,
        Perspective::Local => &params.loc,
    };

    // Source coordinates of token (u, v) of sub-image `idx`.
    let source_xy = |idx: usize, u: usize, v: usize| -> (usize, usize) {
        let (i, j) = (idx / nw, idx % nw);
        match direction {
            Perspective::Global => (j + u * nw, i + v * nh),
            Perspective::Local => (j * wl + u, i * hl + v),
        }
    };

    let mut out = vec![0.0; grid.img_h() * grid.img_w() * d];
    for idx in 0..grid.sub_count() {
        let mut g_tokens = Vec::with_capacity(wl * hl);
        let mut l_tokens = Vec::with_capacity(wl * hl);
        for v in 0..hl {
            for u in 0..wl {
                let (x, y) = source_xy(idx, u, v);
                g_tokens.push(grid_token(f_glo, x, y));
                l_tokens.push(grid_token(f_loc, x, y));
            }
        }
        // Query side and key/value side depend on the direction.
        let enhanced = match direction {
            Perspective::Global => cross_attention_reference(
                &g_tokens,
                &l_tokens,
                &branch.query.weight,
                &branch.key.weight,
                &branch.value.weight,
                d,
            ),
            Perspective::Local => cross_attention_reference(
                &l_tokens,
                &g_tokens,
                &branch.query.weight,
                &branch.key.weight,
                &branch.value.weight,
                d,
            ),
        };
        for v in 0..hl {
            for u in 0..wl {
                let (x, y) = source_xy(idx, u, v);
                let tok = &enhanced[v * wl + u];
                let base = (y * grid.img_w() + x) * d;
                out[base..base + d].copy_from_slice(tok);
            }
        }
    }
    FeatureGrid::new(
        grid.img_h(),
        grid.img_w(),
        d,
        Tensor::new(vec![grid.img_h(), grid.img_w(), d], out).expect("reference grid shape"),
    )
    .expect("reference grid")
}

/// Patch embedding by explicit per-token dot products, for checking the toy
/// encoder. `weight` is `(p*p*channels) x d`, `pos` is `(tokens) x d`.
pub fn patch_embed_reference(
    img: &crate::geometry::ImageTensor,
    patch: usize,
    weight: &Tensor,
    bias: &Tensor,
    pos: &Tensor,
) -> Vec<Vec<f64>> {
    let c = img.channels();
    let d = weight.shape()[1];
    let (th, tw) = (img.height() / patch, img.width() / patch);
    let mut tokens = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            let mut flat = Vec::with_capacity(patch * patch * c);
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        flat.push(img.at(tx * patch + dx, ty * patch + dy, ch));
                    }
                }
            }
            let token_index = ty * tw + tx;
            let tok: Vec<f64> = (0..d)
                .map(|o| {
                    let dot: f64 = flat
                        .iter()
                        .enumerate()
                        .map(|(e, &v)| v * weight.data()[e * d + o])
                        .sum();
                    dot + bias.data()[o] + pos.data()[token_index * d + o]
                })
                .collect();
            tokens.push(tok);
        }
    }
    tokens
}
