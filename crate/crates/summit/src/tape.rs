//! Reverse-mode gradient tape over a fixed, closed operation set.
//!
//! The model architecture is small and static, so instead of a general
//! autodiff system the tape records one of a dozen known operations per
//! node and replays them in reverse. Every backward rule here is covered by
//! a finite-difference check in [`crate::gradcheck`].

use crate::tensor::{self, Scalar, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

/// Probability clamp applied before the focal-loss logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a 1×d row vector to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, F),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: F,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    Transpose(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    MaskRows(NodeId, Vec<u8>),
    /// Row l of the output is `scale_l · table[row_l]`, or the zero vector
    /// where the pick is `None`. This is the token-construction primitive:
    /// the scale carries the observed value, the pick carries the feature
    /// (or feature-category) route.
    ScaledGather {
        table: NodeId,
        picks: Vec<Option<(usize, F)>>,
    },
    Sigmoid(NodeId),
    /// Mean focal loss over an n×1 probability column against 0/1 targets.
    FocalLoss {
        p: NodeId,
        targets: Vec<u8>,
        alpha: F,
        gamma: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads<F> {
    by_node: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

/// Single-threaded recording of one forward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input (data, positional encodings, mask offsets).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), self.needs_grad(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), self.needs_grad(&[a, b])))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = tensor::add_row_broadcast(self.value(a), self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row), self.needs_grad(&[a, row])))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = tensor::scale(self.value(a), s);
        let rg = self.nodes[a].requires_grad;
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(v, Op::SoftmaxRows(a), rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::gelu(self.value(a));
        let rg = self.nodes[a].requires_grad;
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> Result<NodeId> {
        let v = tensor::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::mean_rows(self.value(a))?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(v, Op::MeanRows(a), rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sum_all(self.value(a));
        let rg = self.nodes[a].requires_grad;
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(a))?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = tensor::slice_cols(self.value(a), start, len)?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(v, Op::SliceCols(a, start, len), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&tensors)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stack same-width parts vertically.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("stack_rows of zero tensors".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape("stack_rows column mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(v, Op::StackRows(parts.to_vec()), rg))
    }

    pub fn mask_rows(&mut self, a: NodeId, mask: &[u8]) -> Result<NodeId> {
        let v = tensor::mask_rows(self.value(a), mask)?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(v, Op::MaskRows(a, mask.to_vec()), rg))
    }

    pub fn scaled_gather(
        &mut self,
        table: NodeId,
        picks: Vec<Option<(usize, F)>>,
    ) -> Result<NodeId> {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Tensor::zeros(picks.len(), d);
        for (l, pick) in picks.iter().enumerate() {
            if let Some((row, s)) = pick {
                if *row >= t.rows() {
                    return Err(Error::Shape(format!(
                        "gather row {row} out of bounds for table with {} rows",
                        t.rows()
                    )));
                }
                for c in 0..d {
                    out.set(l, c, *s * t.at(*row, c));
                }
            }
        }
        let rg = self.nodes[table].requires_grad;
        Ok(self.push(out, Op::ScaledGather { table, picks }, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(a));
        let rg = self.nodes[a].requires_grad;
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Mean focal loss of an n×1 probability column against 0/1 targets.
    pub fn focal_loss(&mut self, p: NodeId, targets: &[u8], alpha: F, gamma: F) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.cols() != 1 || pv.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "focal loss expects {}×1 probabilities, got {:?}",
                targets.len(),
                pv.shape()
            )));
        }
        let n = targets.len();
        let mut total = F::ZERO;
        for (i, &y) in targets.iter().enumerate() {
            total += focal_term(pv.at(i, 0), y, alpha, gamma);
        }
        let v = Tensor::scalar(total / F::from_f64(n as f64));
        let rg = self.nodes[p].requires_grad;
        Ok(self.push(
            v,
            Op::FocalLoss {
                p,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node, seeding its gradient with `seed`
    /// (1 for a plain loss, 1/B when per-sample losses are averaged outside
    /// the tape).
    pub fn backward(&mut self, loss: NodeId, seed: F) -> Result<Grads<F>> {
        if self.value(loss).data().len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(seed));

        for id in (0..=loss).rev() {
            let Some(dout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(dout);
                continue;
            }
            self.backprop_node(id, &dout, &mut grads)?;
            grads[id] = Some(dout);
        }
        Ok(Grads { by_node: grads })
    }

    fn backprop_node(
        &self,
        id: NodeId,
        dout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    let bt = tensor::transpose(self.value(*b))?;
                    accumulate(grads, *a, tensor::matmul(dout, &bt)?)?;
                }
                if self.nodes[*b].requires_grad {
                    let at = tensor::transpose(self.value(*a))?;
                    accumulate(grads, *b, tensor::matmul(&at, dout)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.nodes[*a].requires_grad {
                    accumulate(grads, *a, dout.clone())?;
                }
                if self.nodes[*b].requires_grad {
                    accumulate(grads, *b, dout.clone())?;
                }
            }
            Op::AddRow(a, row) => {
                if self.nodes[*a].requires_grad {
                    accumulate(grads, *a, dout.clone())?;
                }
                if self.nodes[*row].requires_grad {
                    let d = dout.cols();
                    let mut sum = Tensor::zeros(1, d);
                    for r in 0..dout.rows() {
                        for c in 0..d {
                            let v = sum.at(0, c) + dout.at(r, c);
                            sum.set(0, c, v);
                        }
                    }
                    accumulate(grads, *row, sum)?;
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, tensor::scale(dout, *s))?;
            }
            Op::SoftmaxRows(a) => {
                // dx = s ⊙ (dy − ⟨dy, s⟩ per row)
                let s = &node.value;
                let mut dx = Tensor::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot: F = (0..s.cols()).map(|c| dout.at(r, c) * s.at(r, c)).sum();
                    for c in 0..s.cols() {
                        dx.set(r, c, s.at(r, c) * (dout.at(r, c) - dot));
                    }
                }
                accumulate(grads, *a, dx)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut dx = dout.clone();
                for (g, &xv) in dx.data_mut().iter_mut().zip(x.data().iter()) {
                    *g = *g * tensor::gelu_grad(xv);
                }
                accumulate(grads, *a, dx)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.backprop_layer_norm(*x, *gain, *bias, *eps, dout, grads)?;
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let inv = F::ONE / F::from_f64(src.rows() as f64);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for c in 0..src.cols() {
                        dx.set(r, c, dout.at(0, c) * inv);
                    }
                }
                accumulate(grads, *a, dx)?;
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                let g = dout.item()?;
                let dx = Tensor::new(src.shape().to_vec(), vec![g; src.data().len()])?;
                accumulate(grads, *a, dx)?;
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, tensor::transpose(dout)?)?;
            }
            Op::SliceCols(a, start, len) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for c in 0..*len {
                        dx.set(r, start + c, dout.at(r, c));
                    }
                }
                accumulate(grads, *a, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p].requires_grad {
                        accumulate(grads, p, tensor::slice_cols(dout, off, w)?)?;
                    }
                    off += w;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = (t.rows(), t.cols());
                    if self.nodes[p].requires_grad {
                        let mut dx = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                dx.set(i, j, dout.at(off + i, j));
                            }
                        }
                        accumulate(grads, p, dx)?;
                    }
                    off += r;
                }
            }
            Op::MaskRows(a, mask) => {
                accumulate(grads, *a, tensor::mask_rows(dout, mask)?)?;
            }
            Op::ScaledGather { table, picks } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.rows(), d);
                for (l, pick) in picks.iter().enumerate() {
                    if let Some((row, s)) = pick {
                        for c in 0..d {
                            let v = dt.at(*row, c) + *s * dout.at(l, c);
                            dt.set(*row, c, v);
                        }
                    }
                }
                accumulate(grads, *table, dt)?;
            }
            Op::Sigmoid(a) => {
                let s = &node.value;
                let mut dx = dout.clone();
                for (g, &sv) in dx.data_mut().iter_mut().zip(s.data().iter()) {
                    *g = *g * sv * (F::ONE - sv);
                }
                accumulate(grads, *a, dx)?;
            }
            Op::FocalLoss {
                p,
                targets,
                alpha,
                gamma,
            } => {
                let pv = self.value(*p);
                let n = targets.len();
                let upstream = dout.item()? / F::from_f64(n as f64);
                let mut dp = Tensor::zeros(n, 1);
                for (i, &y) in targets.iter().enumerate() {
                    dp.set(i, 0, upstream * focal_term_grad(pv.at(i, 0), y, *alpha, *gamma));
                }
                accumulate(grads, *p, dp)?;
            }
        }
        Ok(())
    }

    fn backprop_layer_norm(
        &self,
        x_id: NodeId,
        gain_id: NodeId,
        bias_id: NodeId,
        eps: F,
        dout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let x = self.value(x_id);
        let gain = self.value(gain_id);
        let d = x.cols();
        let inv_d = F::ONE / F::from_f64(d as f64);

        let mut dx = Tensor::zeros(x.rows(), d);
        let mut dgain = Tensor::zeros(1, d);
        let mut dbias = Tensor::zeros(1, d);

        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mu: F = row.iter().copied().sum::<F>() * inv_d;
            let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
            let inv_std = F::ONE / (var + eps).sqrt();

            let mut sum_dxhat = F::ZERO;
            let mut sum_dxhat_xhat = F::ZERO;
            let mut xhat = vec![F::ZERO; d];
            let mut dxhat = vec![F::ZERO; d];
            for c in 0..d {
                xhat[c] = (row[c] - mu) * inv_std;
                dxhat[c] = dout.at(r, c) * gain.data()[c];
                sum_dxhat += dxhat[c];
                sum_dxhat_xhat += dxhat[c] * xhat[c];

                let g = dgain.at(0, c) + dout.at(r, c) * xhat[c];
                dgain.set(0, c, g);
                let b = dbias.at(0, c) + dout.at(r, c);
                dbias.set(0, c, b);
            }
            for c in 0..d {
                let v = inv_std
                    * (dxhat[c] - sum_dxhat * inv_d - xhat[c] * sum_dxhat_xhat * inv_d);
                dx.set(r, c, v);
            }
        }

        if self.nodes[x_id].requires_grad {
            accumulate(grads, x_id, dx)?;
        }
        if self.nodes[gain_id].requires_grad {
            accumulate(grads, gain_id, dgain)?;
        }
        if self.nodes[bias_id].requires_grad {
            accumulate(grads, bias_id, dbias)?;
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(
    grads: &mut [Option<Tensor<F>>],
    id: NodeId,
    delta: Tensor<F>,
) -> Result<()> {
    match &mut grads[id] {
        Some(g) => {
            *g = tensor::add(g, &delta)?;
        }
        slot => *slot = Some(delta),
    }
    Ok(())
}

fn clamp_prob<F: Scalar>(p: F) -> F {
    let lo = F::from_f64(PROB_CLAMP);
    let hi = F::ONE - lo;
    p.max(lo).min(hi)
}

/// Focal loss of one probability against a 0/1 target:
/// −α_t (1−p_t)^γ ln p_t with p_t = p for positives, 1−p otherwise.
pub fn focal_term<F: Scalar>(p: F, y: u8, alpha: F, gamma: F) -> F {
    let (pt, at) = if y == 1 {
        (p, alpha)
    } else {
        (F::ONE - p, F::ONE - alpha)
    };
    let pt = clamp_prob(pt);
    -at * (F::ONE - pt).powf(gamma) * pt.ln()
}

/// d(focal_term)/dp, zero in the clamped region.
pub fn focal_term_grad<F: Scalar>(p: F, y: u8, alpha: F, gamma: F) -> F {
    let (pt_raw, at, dpt_dp) = if y == 1 {
        (p, alpha, F::ONE)
    } else {
        (F::ONE - p, F::ONE - alpha, -F::ONE)
    };
    let pt = clamp_prob(pt_raw);
    if pt != pt_raw {
        return F::ZERO;
    }
    let one_minus = F::ONE - pt;
    let pow_term = if gamma == F::ZERO {
        F::ZERO
    } else {
        gamma * one_minus.powf(gamma - F::ONE)
    };
    let d_dpt = at * pow_term * pt.ln() - at * one_minus.powf(gamma) / pt;
    d_dpt * dpt_dp
}
