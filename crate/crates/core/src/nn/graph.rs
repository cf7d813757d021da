//! Tape-based reverse-mode differentiation.
//!
//! Every op computes its value eagerly when recorded. [`Graph::backward`]
//! walks the tape in reverse from a scalar root. A parameter is recorded at
//! most once per graph, so a table used by several paths accumulates a single
//! gradient.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Padded batch geometry: `batch` sequences of `seq` rows each; rows at or
/// beyond `lengths[b]` are padding and never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl BatchLayout {
    pub fn new(lengths: Vec<usize>) -> Self {
        let seq = lengths.iter().copied().max().unwrap_or(0);
        Self {
            batch: lengths.len(),
            seq,
            lengths,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq + t
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather {
        src: NodeId,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Rc<BatchLayout>,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        log_probs: Tensor,
    },
    BceLogits {
        logits: NodeId,
        targets: Vec<f64>,
        coef: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Record a parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, n);
        n
    }

    pub fn check_finite(&self, id: NodeId, location: &str) -> Result<()> {
        if self.value(id).is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical {
                location: location.to_string(),
            })
        }
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        let bshape = self.value(b).shape();
        if k != k2 || bshape.len() != 2 {
            return Err(shape_err("matmul", self.value(a).shape(), bshape));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    /// Row-broadcast `x[m,n] + bias[n]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(bias).len() != n {
            return Err(shape_err("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Select rows of `src` (an embedding lookup when `src` is a table).
    pub fn gather(&mut self, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(src).dims2();
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index { index: bad, len: m });
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(self.value(src).row(r));
        }
        let out = Tensor::from_vec(&[rows.len(), n], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(out, Op::Gather { src, rows }, rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out.data_mut()[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let t = (GELU_C * (*v + 0.044715 * *v * *v * *v)).tanh();
            *v = 0.5 * *v * (1.0 + t);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention over padded sequences.
    /// `q`, `k`, `v` are `[batch*seq, hidden]`; padded keys are masked out.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: Rc<BatchLayout>, heads: usize) -> Result<NodeId> {
        let (rows, hidden) = self.value(q).dims2();
        if rows != layout.rows() || self.value(k).dims2() != (rows, hidden) || self.value(v).dims2() != (rows, hidden) {
            return Err(Error::Shape("attention inputs disagree with layout".into()));
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Shape(format!("hidden {hidden} not divisible by {heads} heads")));
        }
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = layout.seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; layout.batch * heads * t * t];
        let mut out = Tensor::zeros(&[rows, hidden]);
        let od = out.data_mut();
        let mut scores = vec![0.0; t];
        for b in 0..layout.batch {
            let len = layout.lengths[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * hidden + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        let kj = &kd[(b * t + j) * hidden + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[..len] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    let orow = &mut od[(b * t + i) * hidden + off..][..dh];
                    for j in 0..len {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vd[(b * t + j) * hidden + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2();
        if targets.len() != m || m == 0 {
            return Err(Error::Shape(format!("{} targets for {m} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let log_probs = log_softmax_rows(self.value(logits));
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -log_probs.data()[r * n + t])
            .sum::<f64>()
            / m as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets,
                log_probs,
            },
            rg,
        ))
    }

    pub fn log_probs(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].op {
            Op::SoftmaxXent { log_probs, .. } => Some(log_probs),
            _ => None,
        }
    }

    /// `sum_r coef[r] * BCE(sigmoid(z_r), target_r)` for `z` of shape `[m, 1]`.
    pub fn bce_logits(&mut self, logits: NodeId, targets: Vec<f64>, coef: Vec<f64>) -> Result<NodeId> {
        let z = self.value(logits).data();
        if targets.len() != z.len() || coef.len() != z.len() {
            return Err(Error::Shape("bce targets/coefficients length".into()));
        }
        let loss = z
            .iter()
            .zip(&targets)
            .zip(&coef)
            .filter(|(_, &c)| c != 0.0)
            .map(|((&z, &y), &c)| c * bce_with_logit(z, y))
            .sum::<f64>();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets, coef }, rg))
    }

    /// Gradients of the scalar `root` with respect to every parameter in `store`.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(store);

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let gyd = gy.data();
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.get_mut(*pid).add_assign(&gy),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).dims2().1;
                    if self.nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, *a, self.value(*a).shape());
                        matmul_bt_acc(gyd, self.value(*b).data(), ga, m, n, k);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, *b, self.value(*b).shape());
                        matmul_at_acc(self.value(*a).data(), gyd, gb, m, k, n);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).dims2().0;
                    if self.nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, *a, self.value(*a).shape());
                        matmul_acc(gyd, self.value(*b).data(), ga, m, n, k);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, *b, self.value(*b).shape());
                        matmul_at_acc(gyd, self.value(*a).data(), gb, m, n, k);
                    }
                }
                Op::AddBias(x, bias) => {
                    let (m, n) = self.value(*x).dims2();
                    if self.nodes[bias.0].requires_grad {
                        let gb = slot(&mut grads, *bias, self.value(*bias).shape());
                        for r in 0..m {
                            for (g, v) in gb.iter_mut().zip(&gyd[r * n..(r + 1) * n]) {
                                *g += v;
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        accumulate(slot(&mut grads, *x, self.value(*x).shape()), gyd, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    for id in [a, b] {
                        if self.nodes[id.0].requires_grad {
                            accumulate(slot(&mut grads, *id, self.value(*id).shape()), gyd, 1.0);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(slot(&mut grads, *a, self.value(*a).shape()), gyd, *c);
                }
                Op::Gather { src, rows } => {
                    let n = self.value(*src).dims2().1;
                    let gs = slot(&mut grads, *src, self.value(*src).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (g, v) in gs[r * n..(r + 1) * n].iter_mut().zip(&gyd[i * n..(i + 1) * n]) {
                            *g += v;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = self.value(*x).dims2();
                    let g = self.value(*gain).data();
                    if self.nodes[gain.0].requires_grad {
                        let gg = slot(&mut grads, *gain, self.value(*gain).shape());
                        for r in 0..m {
                            for c in 0..n {
                                gg[c] += gyd[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let gb = slot(&mut grads, *bias, self.value(*bias).shape());
                        for r in 0..m {
                            for c in 0..n {
                                gb[c] += gyd[r * n + c];
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let gx = slot(&mut grads, *x, self.value(*x).shape());
                        let mut dxhat = vec![0.0; n];
                        for r in 0..m {
                            let xh = &xhat[r * n..(r + 1) * n];
                            for c in 0..n {
                                dxhat[c] = gyd[r * n + c] * g[c];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for c in 0..n {
                                gx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, self.value(*x).shape());
                    for ((g, &v), &up) in gx.iter_mut().zip(xv).zip(gyd) {
                        let inner = GELU_C * (v + 0.044715 * v * v * v);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *g += up * d;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, layout, *heads, probs, gyd);
                    accumulate(slot(&mut grads, *q, self.value(*q).shape()), &gq, 1.0);
                    accumulate(slot(&mut grads, *k, self.value(*k).shape()), &gk, 1.0);
                    accumulate(slot(&mut grads, *v, self.value(*v).shape()), &gv, 1.0);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    log_probs,
                } => {
                    let (m, n) = log_probs.dims2();
                    let up = gyd[0] / m as f64;
                    let gl = slot(&mut grads, *logits, self.value(*logits).shape());
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..n {
                            let p = log_probs.data()[r * n + c].exp();
                            gl[r * n + c] += up * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                Op::BceLogits { logits, targets, coef } => {
                    let z = self.value(*logits).data();
                    let gl = slot(&mut grads, *logits, self.value(*logits).shape());
                    for r in 0..z.len() {
                        if coef[r] != 0.0 {
                            gl[r] += gyd[0] * coef[r] * (sigmoid(z[r]) - targets[r]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &BatchLayout,
        heads: usize,
        probs: &[f64],
        gy: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (rows, hidden) = self.value(q).dims2();
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = layout.seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; rows * hidden];
        let mut gk = vec![0.0; rows * hidden];
        let mut gv = vec![0.0; rows * hidden];
        let mut dp = vec![0.0; t];
        for b in 0..layout.batch {
            let len = layout.lengths[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let prow = &probs[((b * heads + h) * t + i) * t..][..t];
                    let go = &gy[(b * t + i) * hidden + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..len {
                        let vj = &vd[(b * t + j) * hidden + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        let gvj = &mut gv[(b * t + j) * hidden + off..][..dh];
                        for (g, &o) in gvj.iter_mut().zip(go) {
                            *g += prow[j] * o;
                        }
                    }
                    let qi_base = (b * t + i) * hidden + off;
                    for j in 0..len {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj_base = (b * t + j) * hidden + off;
                        for d in 0..dh {
                            gq[qi_base + d] += ds * kd[kj_base + d];
                            gk[kj_base + d] += ds * qd[qi_base + d];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn accumulate(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// BCE of `sigmoid(z)` against target `y` in {0, 1}.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    y * softplus(-z) + (1.0 - y) * softplus(z)
}

pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let (m, n) = logits.dims2();
    let mut out = Tensor::zeros(&[m, n]);
    for r in 0..m {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}
