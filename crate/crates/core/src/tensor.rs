//! Minimal dense-tensor engine: row-major storage, the handful of kernels the
//! enhancement math needs, and seeded initialization.
//!
//! Everything computes in double precision with a fixed, sequential summation
//! order so results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `data` matches the shape and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Tensor filled with i.i.d. normal draws of the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.next_normal()).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Sequential sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn ensure_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2 tensor, got {:?}", s))),
    }
}

/// `a (m x k) * b (k x n)`, summed sequentially over `k` for each element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (kb, n) = dims2(b, "matmul")?;
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    ensure_finite(&t, "matmul")?;
    Ok(t)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "softmax_rows")?;
    if n == 0 {
        return Err(Error::shape("softmax_rows", "rows must be non-empty".to_string()));
    }
    ensure_finite(x, "softmax_rows")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    ensure_finite(&t, "softmax_rows")?;
    Ok(t)
}

/// Non-overlapping `kh x kw` window means over an `h x w x d` grid.
pub fn avg_pool(x: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let (h, w, d) = match x.shape() {
        [h, w, d] => (*h, *w, *d),
        s => {
            return Err(Error::shape(
                "avg_pool",
                format!("expected rank-3 tensor, got {:?}", s),
            ))
        }
    };
    if kh == 0 || h % kh != 0 {
        return Err(Error::NotDivisible { extent: h, kernel: kh });
    }
    if kw == 0 || w % kw != 0 {
        return Err(Error::NotDivisible { extent: w, kernel: kw });
    }
    let (oh, ow) = (h / kh, w / kw);
    let norm = (kh * kw) as f64;
    let mut out = vec![0.0; oh * ow * d];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..d {
                let mut acc = 0.0;
                for dy in 0..kh {
                    let y = oy * kh + dy;
                    for dx in 0..kw {
                        let x_ = ox * kw + dx;
                        acc += x.data[(y * w + x_) * d + c];
                    }
                }
                out[(oy * ow + ox) * d + c] = acc / norm;
            }
        }
    }
    let t = Tensor {
        shape: vec![oh, ow, d],
        data: out,
    };
    ensure_finite(&t, "avg_pool")?;
    Ok(t)
}

/// Learnable affine map: a `d_in x d_out` weight and an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, dout) = dims2(&weight, "LinearParams::new")?;
        if let Some(b) = &bias {
            if b.shape() != [dout] {
                return Err(Error::shape(
                    "LinearParams::new",
                    format!("bias {:?} does not match weight {:?}", b.shape(), weight.shape()),
                ));
            }
        }
        Ok(LinearParams { weight, bias })
    }

    /// Weight entries drawn i.i.d. normal with standard deviation `std`;
    /// bias (when requested) starts at zero.
    pub fn init_normal(d_in: usize, d_out: usize, std: f64, with_bias: bool, rng: &mut Rng) -> Self {
        LinearParams {
            weight: Tensor::randn(vec![d_in, d_out], std, rng),
            bias: with_bias.then(|| Tensor::zeros(vec![d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `x (n x d_in) * weight + bias`, bias broadcast over rows.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let mut out = matmul(x, &p.weight)?;
    if let Some(b) = &p.bias {
        let (n, d) = dims2(&out, "linear")?;
        for i in 0..n {
            for j in 0..d {
                out.data[i * d + j] += b.data[j];
            }
        }
        ensure_finite(&out, "linear")?;
        let _ = n;
    }
    Ok(out)
}

fn elementwise(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| f(x, y))
        .collect();
    let t = Tensor {
        shape: a.shape.clone(),
        data,
    };
    ensure_finite(&t, op)?;
    Ok(t)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, "mul", |x, y| x * y)
}

/// Elementwise maximum; ties resolve to the first argument.
pub fn emax(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, "emax", |x, y| if x >= y { x } else { y })
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let t = Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&v| v * c).collect(),
    };
    ensure_finite(&t, "scale")?;
    Ok(t)
}

/// Concatenate two rank-2 tensors along the column (channel) axis.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, na) = dims2(a, "concat_cols")?;
    let (mb, nb) = dims2(b, "concat_cols")?;
    if m != mb {
        return Err(Error::shape(
            "concat_cols",
            format!("row counts differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let mut data = Vec::with_capacity(m * (na + nb));
    for i in 0..m {
        data.extend_from_slice(&a.data[i * na..(i + 1) * na]);
        data.extend_from_slice(&b.data[i * nb..(i + 1) * nb]);
    }
    Ok(Tensor {
        shape: vec![m, na + nb],
        data,
    })
}

/// Stack rank-2 tensors on top of each other (shared column count).
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no inputs".to_string()));
    }
    let (_, n) = dims2(parts[0], "concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (m, np) = dims2(p, "concat_rows")?;
        if np != n {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts differ: {} vs {}", n, np),
            ));
        }
        rows += m;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, n],
        data,
    })
}

/// `out[r] = a[indices[r]]` over rows of a rank-2 tensor.
pub fn gather_rows(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (m, n) = dims2(a, "gather_rows")?;
    let mut data = Vec::with_capacity(indices.len() * n);
    for &r in indices {
        if r >= m {
            return Err(Error::range(
                "gather_rows",
                format!("row {} out of {}", r, m),
            ));
        }
        data.extend_from_slice(&a.data[r * n..(r + 1) * n]);
    }
    Ok(Tensor {
        shape: vec![indices.len(), n],
        data,
    })
}
