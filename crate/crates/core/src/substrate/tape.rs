//! Reverse-mode differentiation over an explicit tape of named operations.
//!
//! Values are computed eagerly as nodes are pushed. [`Tape::backward`] walks
//! the nodes in reverse and returns one gradient per parameter of the
//! borrowed [`ParamStore`]; parameters that never reach the loss get zeros.

use std::rc::Rc;

use super::array::RealArray;
use super::attention::{attention_backward_packed, attention_forward_packed, AttnLayout};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{GridError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, probs: Vec<f64> },
    GatherRows { src: Var, idx: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    Modulate { x: Var, scale: Var, shift: Var },
    CrossEntropyRows { logits: Var, targets: Rc<Vec<usize>>, probs: Vec<f64> },
    SquaredErrorRows { pred: Var, target: Var },
    WeightedSum { x: Var, weights: Rc<Vec<f64>> },
}

struct Node {
    value: Option<RealArray>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// `C (m x n) (+)= op(A) (m x k) * op(B) (k x n)`; `a_t`/`b_t` read the operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: extents and strides above address only elements inside `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealArray {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: RealArray, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: RealArray) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(GridError::Config(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = RealArray::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x (r, in) * w (in, out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, din, dout) = (xv.rows(), xv.cols(), wv.cols());
        if wv.rows() != din {
            return Err(GridError::Config(format!("linear {:?} x {:?}", xv.shape(), wv.shape())));
        }
        let mut out = vec![0.0; r * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(GridError::Config("linear bias width mismatch".into()));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(r, din, dout, xv.data(), false, wv.data(), false, &mut out, b.is_some());
        let value = RealArray::from_vec(vec![r, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(GridError::Config(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= *y;
        }
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Row-wise layer normalization with optional affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for p in gain.iter().chain(bias.iter()) {
            if self.value(*p).len() != c {
                return Err(GridError::Config("layer norm affine width mismatch".into()));
            }
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for (o, v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(g).for_each(|(o, gv)| *o *= gv);
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            }
        }
        let value = RealArray::from_vec(xv.shape().to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &inputs))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= sigmoid(*v));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let width = self.value(q).cols();
        if self.value(k).cols() != width || self.value(v).cols() != width {
            return Err(GridError::Config("attention q/k/v widths differ".into()));
        }
        if self.value(k).rows() != self.value(v).rows() {
            return Err(GridError::Config("attention key/value row counts differ".into()));
        }
        let (out, probs) =
            attention_forward_packed(self.value(q).data(), self.value(k).data(), self.value(v).data(), width, &layout)?;
        let value = RealArray::from_vec(vec![self.value(q).rows(), width], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }, &[q, k, v]))
    }

    /// Attention nodes in recording order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. })).map(Var).collect()
    }

    /// Probabilities saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnLayout, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let sv = self.value(src);
        let c = sv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= sv.rows() {
                return Err(GridError::Config(format!("gather index {i} out of {} rows", sv.rows())));
            }
            out.extend_from_slice(sv.row(i));
        }
        let value = RealArray::from_vec(vec![idx.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { src, idx }, &[src]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != c {
                return Err(GridError::Config("concat_rows width mismatch".into()));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = RealArray::from_vec(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `x * (1 + scale) + shift`, elementwise.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.same_shape(x, scale, "modulate")?;
        self.same_shape(x, shift, "modulate")?;
        let mut value = self.value(x).clone();
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        for ((o, sv), tv) in value.data_mut().iter_mut().zip(s).zip(t) {
            *o = *o * (1.0 + sv) + tv;
        }
        Ok(self.push(value, Op::Modulate { x, scale, shift }, &[x, scale, shift]))
    }

    /// Per-row softmax cross-entropy, shape `(rows,)`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, k) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(GridError::Config("target count differs from logit rows".into()));
        }
        let mut probs = vec![0.0; r * k];
        let mut losses = vec![0.0; r];
        for i in 0..r {
            let t = targets[i];
            if t >= k {
                return Err(GridError::Config(format!("target id {t} out of vocabulary {k}")));
            }
            let row = lv.row(i);
            let (_, lse) = log_softmax_parts(row, &mut probs[i * k..(i + 1) * k]);
            losses[i] = lse - row[t];
        }
        let value = RealArray::from_vec(vec![r], losses)?;
        Ok(self.push(value, Op::CrossEntropyRows { logits, targets, probs }, &[logits]))
    }

    /// Per-row sum of squared differences, shape `(rows,)`.
    pub fn squared_error_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "squared_error_rows")?;
        let (pv, tv) = (self.value(pred), self.value(target));
        let losses: Vec<f64> = (0..pv.rows())
            .map(|i| pv.row(i).iter().zip(tv.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let value = RealArray::from_vec(vec![losses.len()], losses)?;
        Ok(self.push(value, Op::SquaredErrorRows { pred, target }, &[pred, target]))
    }

    /// Scalar `sum_i weights[i] * x[i]` over the flattened input.
    pub fn weighted_sum(&mut self, x: Var, weights: Rc<Vec<f64>>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(GridError::Config("weighted_sum length mismatch".into()));
        }
        let s: f64 = xv.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        Ok(self.push(RealArray::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.weighted_sum(x, Rc::new(vec![1.0 / n as f64; n]))
    }

    /// Gradient of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(GridError::Config("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<RealArray>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<RealArray>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(RealArray::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut pgrads[id.0], g),
                op => self.backward_op(op, g, &mut grads)?,
            }
        }
        Ok(Gradients(
            pgrads
                .into_iter()
                .zip(self.params.iter())
                .map(|(g, p)| g.unwrap_or_else(|| RealArray::zeros(p.value.shape())))
                .collect(),
        ))
    }

    fn backward_op(&self, op: &Op, g: RealArray, grads: &mut [Option<RealArray>]) -> Result<()> {
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    add_grad(grads, *a, av.shape(), da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    add_grad(grads, *b, bv.shape(), db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, din, dout) = (xv.rows(), xv.cols(), wv.cols());
                if self.needs(*x) {
                    let mut dx = vec![0.0; r * din];
                    gemm(r, dout, din, g.data(), false, wv.data(), true, &mut dx, false);
                    add_grad(grads, *x, xv.shape(), dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, r, dout, xv.data(), true, g.data(), false, &mut dw, false);
                    add_grad(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.data().chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        add_grad(grads, *b, self.value(*b).shape(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_grad(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.needs(*b) {
                    let shape = g.shape().to_vec();
                    add_grad(grads, *b, &shape, g.into_data());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, *a, av.shape(), d);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, *b, bv.shape(), d);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|x| x * s).collect();
                add_grad(grads, *a, g.shape(), d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = g.cols();
                let r = g.rows();
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        add_grad(grads, *b, &[c], db);
                    }
                }
                if let Some(gn) = gain {
                    if self.needs(*gn) {
                        let mut dg = vec![0.0; c];
                        for (row, xh) in g.data().chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += row[j] * xh[j];
                            }
                        }
                        add_grad(grads, *gn, &[c], dg);
                    }
                }
                if self.needs(*x) {
                    let gv = gain.map(|gn| self.value(gn).data());
                    let mut dx = vec![0.0; r * c];
                    let mut dxh = vec![0.0; c];
                    for i in 0..r {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gv.map_or(1.0, |w| w[j]);
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    add_grad(grads, *x, g.shape(), dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                add_grad(grads, *x, xv.shape(), d);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, xv)| {
                        let s = sigmoid(*xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                add_grad(grads, *x, xv.shape(), d);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.cols();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                attention_backward_packed(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    g.data(),
                    width,
                    layout,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                if self.needs(*q) {
                    add_grad(grads, *q, qv.shape(), dq);
                }
                if self.needs(*k) {
                    add_grad(grads, *k, kv.shape(), dk);
                }
                if self.needs(*v) {
                    add_grad(grads, *v, vv.shape(), dv);
                }
            }
            Op::GatherRows { src, idx } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let mut d = vec![0.0; sv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    d[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
                add_grad(grads, *src, sv.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    if self.needs(*p) {
                        add_grad(grads, *p, pv.shape(), g.data()[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Modulate { x, scale, shift } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if self.needs(*x) {
                    let d = g.data().iter().zip(sv.data()).map(|(a, s)| a * (1.0 + s)).collect();
                    add_grad(grads, *x, xv.shape(), d);
                }
                if self.needs(*scale) {
                    let d = g.data().iter().zip(xv.data()).map(|(a, x)| a * x).collect();
                    add_grad(grads, *scale, sv.shape(), d);
                }
                if self.needs(*shift) {
                    let shape = g.shape().to_vec();
                    add_grad(grads, *shift, &shape, g.into_data());
                }
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= 1.0;
                    let gi = g.data()[i];
                    d[i * k..(i + 1) * k].iter_mut().for_each(|x| *x *= gi);
                }
                add_grad(grads, *logits, lv.shape(), d);
            }
            Op::SquaredErrorRows { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let c = pv.cols();
                let mut d = vec![0.0; pv.len()];
                for i in 0..pv.rows() {
                    let gi = 2.0 * g.data()[i];
                    for j in 0..c {
                        d[i * c + j] = gi * (pv.data()[i * c + j] - tv.data()[i * c + j]);
                    }
                }
                if self.needs(*target) {
                    add_grad(grads, *target, tv.shape(), d.iter().map(|x| -x).collect());
                }
                if self.needs(*pred) {
                    add_grad(grads, *pred, pv.shape(), d);
                }
            }
            Op::WeightedSum { x, weights } => {
                let gs = g.data()[0];
                let d = weights.iter().map(|w| w * gs).collect();
                add_grad(grads, *x, self.value(*x).shape(), d);
            }
        }
        Ok(())
    }
}

/// Softmax of `row` into `probs`; returns `(max, log-sum-exp)`.
pub(crate) fn log_softmax_parts(row: &[f64], probs: &mut [f64]) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (p, x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        denom += *p;
    }
    probs.iter_mut().for_each(|p| *p /= denom);
    (max, max + denom.ln())
}

fn accumulate(slot: &mut Option<RealArray>, g: RealArray) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_grad(grads: &mut [Option<RealArray>], v: Var, shape: &[usize], data: Vec<f64>) {
    let arr = RealArray::from_vec(shape.to_vec(), data).expect("gradient shape");
    accumulate(&mut grads[v.0], arr);
}
