//! Wengert-list reverse-mode differentiation over the primitives the model uses.
//!
//! Every tape method runs the forward kernel immediately and records enough
//! state to replay the chain rule later. Gradients are computed by walking the
//! node list backwards once.

use super::ops::{self, check_linear, matmul_into};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    WeightedSum(Vec<(NodeId, T)>),
    Scale {
        x: NodeId,
        s: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
    },
    Concat(Vec<NodeId>),
    SelectRow {
        x: NodeId,
        row: usize,
    },
    MeanRows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    Wce {
        logits: NodeId,
        target: usize,
        weight: T,
        probs: Vec<T>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(NodeId, ParamId)>,
    order: Vec<NodeId>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads[node.0].as_ref()
    }

    /// Nodes in the order the reverse sweep processed them.
    pub fn visit_order(&self) -> &[NodeId] {
        &self.order
    }

    /// Gradient contributions per parameter use. A parameter read several
    /// times appears once per read.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(node, pid)| self.grads[node.0].as_ref().map(|g| (pid, g)))
    }

    /// Per-parameter gradients with repeated reads summed, in first-read
    /// order. Drops the per-node buffers.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        let mut params = std::mem::take(&mut self.params);
        params.reverse();
        for (node, pid) in params {
            let Some(g) = self.grads[node.0].take() else { continue };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_scaled(&g, T::one()).expect("same parameter, same shape"),
                None => out.push((pid, g)),
            }
        }
        out
    }

    /// Adds `scale * dL/dp` into the grad slot of every trainable parameter.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) -> Result<()> {
        for (pid, g) in self.param_grads() {
            let slot = store.slot_mut(pid);
            if slot.trainable {
                slot.grad.add_scaled(g, scale)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => unreachable!("params pushed via Tape::param"),
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let slot = store.slot(id);
        self.nodes.push(Node {
            value: slot.value.clone(),
            op: Op::Param(id),
            requires_grad: slot.trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// `Σ cᵢ·xᵢ` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum of no terms".into()))?;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(id, c) in terms {
            out.add_scaled(self.value(id), c)
                .map_err(|_| Error::shape("weighted_sum", self.value(first).shape(), self.value(id).shape()))?;
        }
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), &inputs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.weighted_sum(&[(a, T::one()), (b, T::one())])
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).item()?;
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x, s }, &[x, s]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (out, xhat, rstd) =
            ops::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Scaled dot-product attention over projected `[n, d]` rows.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (out, probs) = ops::attention_core(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, node: NodeId) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = ops::cosine_sim(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(s), Op::Cosine { a, b }, &[a, b]))
    }

    /// Concatenates the flattened inputs and views the result as `shape`.
    pub fn concat(&mut self, parts: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(x);
        if row >= t.rows() {
            return Err(Error::InvalidArgument(format!(
                "row {row} out of range for shape {:?}",
                t.shape()
            )));
        }
        let out = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(out, Op::SelectRow { x, row }, &[x]))
    }

    /// Mean over rows `start..end` of `x`.
    pub fn mean_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(x);
        if start >= end || end > t.rows() {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{end} invalid for shape {:?}",
                t.shape()
            )));
        }
        let d = t.cols();
        let inv = T::one() / T::lit((end - start) as f64);
        let mut out = vec![T::zero(); d];
        for r in start..end {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x, start, end }, &[x]))
    }

    /// `-weights[target] * log softmax(logits)[target]`.
    pub fn wce(&mut self, logits: NodeId, target: usize, weights: &[T]) -> Result<NodeId> {
        let z = self.value(logits);
        if weights.len() != z.numel() {
            return Err(Error::shape("wce", z.shape(), &[weights.len()]));
        }
        if target >= z.numel() {
            return Err(Error::InvalidArgument(format!(
                "class index {target} out of range for {} classes",
                z.numel()
            )));
        }
        let lse = ops::log_sum_exp(z.data());
        let weight = weights[target];
        let loss = weight * (lse - z.data()[target]);
        let probs = z.data().iter().map(|&v| (v - lse).exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Wce {
                logits,
                target,
                weight,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        let mut order = Vec::new();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            order.push(NodeId(i));
            if let Op::Param(pid) = node.op {
                params.push((NodeId(i), pid));
                grads[i] = Some(dy);
                continue;
            }
            self.backprop(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params,
            order,
        })
    }

    /// Accumulates `dloss/dparam` into the grad slot of every trainable
    /// parameter read by the tape. Grads are summed, not overwritten.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        self.gradients(loss)?.accumulate_into(store, T::one())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, d_in, d_out) = check_linear(xv, wv, None)?;
                if self.wants(*x) {
                    let gx = slot(grads, *x, xv.shape());
                    matmul_into(dy.data(), false, wv.data(), true, gx.data_mut(), rows, d_out, d_in, true);
                }
                if self.wants(*w) {
                    let gw = slot(grads, *w, wv.shape());
                    matmul_into(xv.data(), true, dy.data(), false, gw.data_mut(), d_in, rows, d_out, true);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let gb = slot(grads, b, &[d_out]);
                    for row in dy.data().chunks_exact(d_out) {
                        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, c) in terms {
                    if self.wants(id) {
                        slot(grads, id, dy.shape()).add_scaled(dy, c)?;
                    }
                }
            }
            Op::Scale { x, s } => {
                let xv = self.value(*x);
                let factor = self.value(*s).item()?;
                if self.wants(*s) {
                    let ds: T = dy.data().iter().zip(xv.data()).map(|(&g, &v)| g * v).sum();
                    slot(grads, *s, &[1]).data_mut()[0] += ds;
                }
                if self.wants(*x) {
                    slot(grads, *x, xv.shape()).add_scaled(dy, factor)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = dy.cols();
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, &[d]);
                    for (dr, hr) in dy.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg.data_mut()[j] += dr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, &[d]);
                    for dr in dy.data().chunks_exact(d) {
                        for (g, &v) in gb.data_mut().iter_mut().zip(dr) {
                            *g += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let gx = slot(grads, *x, self.value(*x).shape());
                    let rows = dy.data().chunks_exact(d).zip(xhat.chunks_exact(d));
                    for (r, (dr, hr)) in rows.enumerate() {
                        let mut mean_g = T::zero();
                        let mut mean_gh = T::zero();
                        for j in 0..d {
                            let g = dr[j] * gv.data()[j];
                            mean_g += g;
                            mean_gh += g * hr[j];
                        }
                        mean_g *= inv_d;
                        mean_gh *= inv_d;
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let g = dr[j] * gv.data()[j];
                            out[j] += rstd[r] * (g - mean_g - hr[j] * mean_gh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv.shape());
                for ((g, &v), &d) in gx.data_mut().iter_mut().zip(xv.data()).zip(dy.data()) {
                    *g += d * ops::gelu_grad_scalar(v);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, dy, grads),
            Op::Cosine { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (s, _, na, nb) = ops::cosine_parts(av, bv);
                let g = dy.data()[0];
                let eps = T::lit(ops::COSINE_EPS);
                let denom = na * nb;
                for (this, other, n) in [(*a, bv, na), (*b, av, nb)] {
                    if !self.wants(this) {
                        continue;
                    }
                    let own = self.value(this);
                    let raw_norm = own.norm();
                    let gt = slot(grads, this, own.shape());
                    for ((o, &ov), &tv) in gt.data_mut().iter_mut().zip(other).zip(own.data()) {
                        let mut d = ov / denom;
                        if raw_norm > eps {
                            d -= s * tv / (n * n);
                        }
                        *o += g * d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        let gp = slot(grads, p, self.value(p).shape());
                        for (g, &d) in gp.data_mut().iter_mut().zip(&dy.data()[offset..offset + len]) {
                            *g += d;
                        }
                    }
                    offset += len;
                }
            }
            Op::SelectRow { x, row } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let gx = slot(grads, *x, xv.shape());
                for (g, &v) in gx.data_mut()[row * d..(row + 1) * d].iter_mut().zip(dy.data()) {
                    *g += v;
                }
            }
            Op::MeanRows { x, start, end } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let inv = T::one() / T::lit((end - start) as f64);
                let gx = slot(grads, *x, xv.shape());
                for r in *start..*end {
                    for (g, &v) in gx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(dy.data()) {
                        *g += v * inv;
                    }
                }
            }
            Op::Wce {
                logits,
                target,
                weight,
                probs,
            } => {
                let g = dy.data()[0] * *weight;
                let gz = slot(grads, *logits, self.value(*logits).shape());
                for (j, (o, &p)) in gz.data_mut().iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *target { T::one() } else { T::zero() };
                    *o += g * (p - onehot);
                }
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                let gx = slot(grads, *x, self.value(*x).shape());
                gx.data_mut().iter_mut().for_each(|o| *o += g);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let ld = d as isize;
        let nn = n as isize;
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n * n];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * n * n..(h + 1) * n * n];
            // dV_h = Pᵀ · dO_h
            T::gemm(n, n, dh, T::one(), p, (1, nn), &dy.data()[off..], (ld, 1), T::zero(), &mut dv[off..], (ld, 1));
            // dP = dO_h · V_hᵀ
            T::gemm(n, dh, n, T::one(), &dy.data()[off..], (ld, 1), &vv.data()[off..], (1, ld), T::zero(), &mut dp, (nn, 1));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dp_row, p_row) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot: T = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dp_row.iter_mut().zip(p_row) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ_h = scale · dS · K_h ; dK_h = scale · dSᵀ · Q_h
            T::gemm(n, n, dh, scale, &dp, (nn, 1), &kv.data()[off..], (ld, 1), T::zero(), &mut dq[off..], (ld, 1));
            T::gemm(n, n, dh, scale, &dp, (1, nn), &qv.data()[off..], (ld, 1), T::zero(), &mut dk[off..], (ld, 1));
        }
        for (id, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(id) {
                let target = slot(grads, id, &[n, d]);
                for (t, gv) in target.data_mut().iter_mut().zip(g) {
                    *t += gv;
                }
            }
        }
    }
}

/// Gradient buffer for `id`, created zeroed on first use.
fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}
