//! Reverse-mode differentiation over the fixed op set the enhancement graph
//! is built from, plus the central-difference gradient checker.
//!
//! This is a small eager tape, not a general autodiff engine: the forward
//! value of every node is computed at insertion time with the same kernels
//! the plain ops use, and `backward` walks the tape in reverse with a fixed
//! accumulation order, so both values and gradients are deterministic.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Scale(f64),
    Add,
    Mul,
    Emax,
    SoftmaxRows,
    AddBias,
    ConcatCols,
    ConcatRows,
    GatherRows(Vec<usize>),
    AvgPool { kh: usize, kw: usize },
    Reshape,
    ScaleByScalar,
    SumAll,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Eager computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose, vec![a], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = tensor::scale(self.value(a), c)?;
        Ok(self.push(Op::Scale(c), vec![a], v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn emax(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::emax(self.value(a), self.value(b))?;
        Ok(self.push(Op::Emax, vec![a, b], v))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows, vec![a], v))
    }

    /// `x (n x d) + bias (d)` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (n, d) = match xv.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("add_bias", format!("x must be rank 2, got {:?}", s))),
        };
        if bv.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match row width {}", bv.shape(), d),
            ));
        }
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bv.data()[j];
            }
        }
        let v = Tensor::new(vec![n, d], data)?;
        Ok(self.push(Op::AddBias, vec![x, bias], v))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCols, vec![a, b], v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_rows(&tensors)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), v))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = tensor::gather_rows(self.value(a), &indices)?;
        Ok(self.push(Op::GatherRows(indices), vec![a], v))
    }

    pub fn avg_pool(&mut self, a: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let v = tensor::avg_pool(self.value(a), kh, kw)?;
        Ok(self.push(Op::AvgPool { kh, kw }, vec![a], v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], v))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape(
                "scale_by_scalar",
                format!("scalar operand has shape {:?}", sv.shape()),
            ));
        }
        let c = sv.data()[0];
        let v = tensor::scale(self.value(x), c)?;
        Ok(self.push(Op::ScaleByScalar, vec![x, s], v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        if !s.is_finite() {
            return Err(Error::NonFinite("sum_all"));
        }
        Ok(self.push(Op::SumAll, vec![a], Tensor::scalar(s)))
    }

    /// Reverse-mode pass from a scalar `loss` node. Returns one gradient slot
    /// per node; nodes the loss does not depend on keep `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::Matmul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let ga = tensor::matmul(&gout, &tensor::transpose(b)?)?;
                    let gb = tensor::matmul(&tensor::transpose(a)?, &gout)?;
                    accumulate(&mut grads, node.inputs[0], ga)?;
                    accumulate(&mut grads, node.inputs[1], gb)?;
                }
                Op::Transpose => {
                    accumulate(&mut grads, node.inputs[0], tensor::transpose(&gout)?)?;
                }
                Op::Scale(c) => {
                    accumulate(&mut grads, node.inputs[0], tensor::scale(&gout, *c)?)?;
                }
                Op::Add => {
                    accumulate(&mut grads, node.inputs[0], gout.clone())?;
                    accumulate(&mut grads, node.inputs[1], gout)?;
                }
                Op::Mul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    accumulate(&mut grads, node.inputs[0], tensor::mul(&gout, b)?)?;
                    accumulate(&mut grads, node.inputs[1], tensor::mul(&gout, a)?)?;
                }
                Op::Emax => {
                    // Subgradient: ties route to the first argument, matching
                    // the forward kernel.
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let mut ga = vec![0.0; gout.numel()];
                    let mut gb = vec![0.0; gout.numel()];
                    for (k, &g) in gout.data().iter().enumerate() {
                        if a.data()[k] >= b.data()[k] {
                            ga[k] = g;
                        } else {
                            gb[k] = g;
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], Tensor::new(a.shape().to_vec(), ga)?)?;
                    accumulate(&mut grads, node.inputs[1], Tensor::new(b.shape().to_vec(), gb)?)?;
                }
                Op::SoftmaxRows => {
                    let y = &node.value;
                    let (m, n) = (y.shape()[0], y.shape()[1]);
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let yrow = &y.data()[i * n..(i + 1) * n];
                        let grow = &gout.data()[i * n..(i + 1) * n];
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            gx[i * n + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], Tensor::new(vec![m, n], gx)?)?;
                }
                Op::AddBias => {
                    let (n, d) = (gout.shape()[0], gout.shape()[1]);
                    let mut gb = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += gout.data()[i * d + j];
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], gout.clone())?;
                    accumulate(&mut grads, node.inputs[1], Tensor::new(vec![d], gb)?)?;
                }
                Op::ConcatCols => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let (m, na) = (a.shape()[0], a.shape()[1]);
                    let nb = b.shape()[1];
                    let mut ga = Vec::with_capacity(m * na);
                    let mut gb = Vec::with_capacity(m * nb);
                    for i in 0..m {
                        let row = &gout.data()[i * (na + nb)..(i + 1) * (na + nb)];
                        ga.extend_from_slice(&row[..na]);
                        gb.extend_from_slice(&row[na..]);
                    }
                    accumulate(&mut grads, node.inputs[0], Tensor::new(vec![m, na], ga)?)?;
                    accumulate(&mut grads, node.inputs[1], Tensor::new(vec![m, nb], gb)?)?;
                }
                Op::ConcatRows => {
                    let mut offset = 0;
                    let inputs = node.inputs.clone();
                    for part in inputs {
                        let shape = self.value(part).shape().to_vec();
                        let count: usize = shape.iter().product();
                        let g = Tensor::new(
                            shape,
                            gout.data()[offset..offset + count].to_vec(),
                        )?;
                        offset += count;
                        accumulate(&mut grads, part, g)?;
                    }
                }
                Op::GatherRows(indices) => {
                    let a = self.value(node.inputs[0]);
                    let (m, n) = (a.shape()[0], a.shape()[1]);
                    let mut ga = vec![0.0; m * n];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += gout.data()[r * n + j];
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], Tensor::new(vec![m, n], ga)?)?;
                }
                Op::AvgPool { kh, kw } => {
                    let a = self.value(node.inputs[0]);
                    let (h, w, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                    let ow = w / kw;
                    let norm = (kh * kw) as f64;
                    let mut ga = vec![0.0; h * w * d];
                    for y in 0..h {
                        for x in 0..w {
                            let (oy, ox) = (y / kh, x / kw);
                            for c in 0..d {
                                ga[(y * w + x) * d + c] =
                                    gout.data()[(oy * ow + ox) * d + c] / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], Tensor::new(vec![h, w, d], ga)?)?;
                }
                Op::Reshape => {
                    let shape = self.value(node.inputs[0]).shape().to_vec();
                    accumulate(&mut grads, node.inputs[0], gout.reshape(shape)?)?;
                }
                Op::ScaleByScalar => {
                    let x = self.value(node.inputs[0]);
                    let s = self.value(node.inputs[1]);
                    let gx = tensor::scale(&gout, s.data()[0])?;
                    let gs: f64 = x
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(xv, gv)| xv * gv)
                        .sum();
                    accumulate(&mut grads, node.inputs[0], gx)?;
                    accumulate(
                        &mut grads,
                        node.inputs[1],
                        Tensor::new(s.shape().to_vec(), vec![gs])?,
                    )?;
                }
                Op::SumAll => {
                    let shape = self.value(node.inputs[0]).shape().to_vec();
                    accumulate(&mut grads, node.inputs[0], Tensor::filled(shape, gout.data()[0]))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    grads[id.0] = Some(match grads[id.0].take() {
        Some(existing) => tensor::add(&existing, &g)?,
        None => g,
    });
    Ok(())
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// A differentiable scalar function of a flat parameter vector, expressed as
/// a graph builder. Returns the graph, the scalar loss node, and the leaf
/// nodes that correspond to consecutive segments of `theta`.
pub type LossBuilder<'a> = dyn Fn(&[f64]) -> Result<(Graph, NodeId, Vec<NodeId>)> + 'a;

/// Compare reverse-mode gradients against central differences
/// `(f(t+h) - f(t-h)) / 2h`, coordinate by coordinate. Returns the worst
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(build: &LossBuilder, theta: &[f64], step: f64) -> Result<f64> {
    assert!(step > 0.0, "step must be positive");

    let (graph, loss, params) = build(theta)?;
    let grads = graph.backward(loss)?;
    let mut analytic = Vec::with_capacity(theta.len());
    for p in &params {
        match grads.wrt(*p) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(graph.value(*p).numel())),
        }
    }
    if analytic.len() != theta.len() {
        return Err(Error::shape(
            "grad_check",
            format!(
                "parameter leaves cover {} values, theta has {}",
                analytic.len(),
                theta.len()
            ),
        ));
    }

    let eval = |t: &[f64]| -> Result<f64> {
        let (graph, loss, _) = build(t)?;
        Ok(graph.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut perturbed = theta.to_vec();
    for i in 0..theta.len() {
        perturbed[i] = theta[i] + step;
        let up = eval(&perturbed)?;
        perturbed[i] = theta[i] - step;
        let down = eval(&perturbed)?;
        perturbed[i] = theta[i];
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let theta: Vec<f64> = vec![0.3, -1.2, 4.0, 0.0, 2.5];
        let build = |t: &[f64]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
            let mut g = Graph::new();
            let p = g.leaf(Tensor::new(vec![t.len()], t.to_vec())?);
            let loss = g.sum_all(p)?;
            Ok((g, loss, vec![p]))
        };
        let err = grad_check(&build, &theta, 1e-4).unwrap();
        assert!(err <= 1e-10, "relative error {}", err);
    }

    #[test]
    fn softmax_row_sums_are_conserved() {
        // f = sum(softmax(theta)) is constant, so the gradient vanishes. The
        // central difference of a constant only cancels exactly when the
        // computed row sums land on the same double under each +-h
        // perturbation; these values do.
        let theta = vec![
            -1.0545578605049215,
            0.6249421169287639,
            1.4756357684956125,
            1.357325268046345,
            -0.7022670795234744,
            -1.3632827008248456,
        ];
        let build = |t: &[f64]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
            let mut g = Graph::new();
            let p = g.leaf(Tensor::new(vec![2, 3], t.to_vec())?);
            let y = g.softmax_rows(p)?;
            let loss = g.sum_all(y)?;
            Ok((g, loss, vec![p]))
        };
        let err = grad_check(&build, &theta, 1e-4).unwrap();
        assert!(err <= 1e-6, "relative error {}", err);

        // The analytic gradient itself is zero to rounding for any theta.
        let (g, loss, params) = build(&theta).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in grads.wrt(params[0]).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn every_op_matches_central_differences_on_random_shapes() {
        let mut rng = Rng::new(77);
        for trial in 0..5 {
            // The last trial runs at the full 8x8x8 scale.
            let m = if trial == 4 { 8 } else { 2 + trial % 3 };
            let k = if trial == 4 { 8 } else { 3 + trial % 2 };
            let n = if trial == 4 { 8 } else { 2 + (trial + 1) % 3 };
            let na = m * k;
            let nb = k * n;
            let nbias = n;
            let theta: Vec<f64> = (0..na + nb + nbias).map(|_| rng.next_signed()).collect();
            let build = move |t: &[f64]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
                let mut g = Graph::new();
                let a = g.leaf(Tensor::new(vec![m, k], t[..na].to_vec())?);
                let b = g.leaf(Tensor::new(vec![k, n], t[na..na + nb].to_vec())?);
                let bias = g.leaf(Tensor::new(vec![n], t[na + nb..].to_vec())?);
                let prod = g.matmul(a, b)?;
                let biased = g.add_bias(prod, bias)?;
                let scaled = g.scale(biased, 0.5)?;
                let soft = g.softmax_rows(scaled)?;
                let self_mul = g.mul(soft, biased)?;
                let maxed = g.emax(self_mul, soft)?;
                let both = g.concat_cols(maxed, soft)?;
                let stacked = g.concat_rows(&[both, both])?;
                let picked = g.gather_rows(stacked, (0..2 * m).rev().collect())?;
                let tr = g.transpose(picked)?;
                let back = g.transpose(tr)?;
                let grid = g.reshape(back, vec![2 * m, n, 2])?;
                let pooled = g.avg_pool(grid, 2, 1)?;
                let loss = g.sum_all(pooled)?;
                Ok((g, loss, vec![a, b, bias]))
            };
            let err = grad_check(&build, &theta, 1e-4).unwrap();
            assert!(err < 1e-3, "trial {}: relative error {}", trial, err);
        }
    }

    #[test]
    fn scale_by_scalar_and_weighted_mix_gradients() {
        let mut rng = Rng::new(4);
        let nx = 6;
        let theta: Vec<f64> = (0..2 * nx + 2).map(|_| rng.next_signed()).collect();
        let build = move |t: &[f64]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![2, 3], t[..nx].to_vec())?);
            let y = g.leaf(Tensor::new(vec![2, 3], t[nx..2 * nx].to_vec())?);
            let logits = g.leaf(Tensor::new(vec![1, 2], t[2 * nx..].to_vec())?);
            let weights = g.softmax_rows(logits)?;
            let wt = g.transpose(weights)?;
            let w0 = g.gather_rows(wt, vec![0])?;
            let w1 = g.gather_rows(wt, vec![1])?;
            let sx = g.scale_by_scalar(x, w0)?;
            let sy = g.scale_by_scalar(y, w1)?;
            let mix = g.add(sx, sy)?;
            let loss = g.sum_all(mix)?;
            Ok((g, loss, vec![x, y, logits]))
        };
        let err = grad_check(&build, &theta, 1e-4).unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(g.backward(a).is_err());
    }
}
