//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable op whose inputs are tracked.
//! Nodes are appended in execution order, so reverse index order is a
//! valid topological order for the backward sweep. A [`Var`] pairs a
//! shared tensor value with an optional tape node; [`Var::detach`] drops
//! the node, which is how gradient stopping is expressed.
//!
//! A tape built with [`Tape::no_grad`] never records anything, so values
//! are freed as soon as their last `Var` is dropped.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm_new, log_sum_exp, MatRef, Scalar, Tensor};

pub type NodeId = usize;

/// Vector-Jacobian product of one recorded op.
pub trait Backward<T: Scalar> {
    /// Given d(loss)/d(output), returns d(loss)/d(input) for each input.
    /// `wanted[i]` is false when input `i` is untracked; its slot may be `None`.
    fn backward(&self, grad: &Tensor<T>, wanted: &[bool]) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    inputs: Vec<Option<NodeId>>,
    /// `None` for leaves.
    op: Option<Box<dyn Backward<T>>>,
}

/// A value flowing through a computation, optionally tracked by a tape.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("value", &self.value).finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value: Arc::new(value), node: None }
    }

    pub fn shared(value: Arc<Tensor<T>>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_arc(&self) -> &Arc<Tensor<T>> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no tape ancestry: gradients do not flow through the result.
    pub fn detach(&self) -> Self {
        Var { value: Arc::clone(&self.value), node: None }
    }
}

/// Free-function form of [`Var::detach`].
pub fn detach<T: Scalar>(x: &Var<T>) -> Var<T> {
    x.detach()
}

pub struct Tape<T: Scalar> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { recording: true, nodes: RefCell::new(Vec::new()) }
    }

    /// A tape that records nothing: every op result is an untracked value.
    pub fn no_grad() -> Self {
        Tape { recording: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf. On a no-grad tape this is a constant.
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var::shared(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { inputs: Vec::new(), op: None });
        Var { value, node: Some(nodes.len() - 1) }
    }

    /// Records a custom op. The node is only created when recording and at
    /// least one input is tracked.
    pub fn record(&self, value: Tensor<T>, inputs: &[&Var<T>], op: impl Backward<T> + 'static) -> Var<T> {
        let ids: Vec<Option<NodeId>> = inputs.iter().map(|v| v.node).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { inputs: ids, op: Some(Box::new(op)) });
        Var { value: Arc::new(value), node: Some(nodes.len() - 1) }
    }

    /// Runs the backward sweep from a scalar loss and consumes the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(root) = loss.node else {
            return Err(Error::Contract("loss is not on the tape".into()));
        };
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[id].take() else { continue };
            let wanted: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = op.backward(&g, &wanted)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(input), Some(ig)) = (input, ig) {
                    match &mut grads[*input] {
                        Some(acc) => acc.add_assign(&ig)?,
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        // Only leaves keep their gradient; interior buffers were consumed.
        let leaves = nodes.iter().map(|n| n.op.is_none()).collect::<Vec<_>>();
        for (g, leaf) in grads.iter_mut().zip(leaves) {
            if !leaf {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves after [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, or zeros when it is unreachable.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![w[0].then(|| g.clone()), w[1].then(|| g.clone())])
    }
}

struct SubOp;
impl<T: Scalar> Backward<T> for SubOp {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![w[0].then(|| g.clone()), w[1].then(|| g.scale(-T::one()))])
    }
}

struct MulOp<T: Scalar> {
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
}
impl<T: Scalar> Backward<T> for MulOp<T> {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let ga = if w[0] { Some(g.zip_map(&self.b, |x, y| x * y)?) } else { None };
        let gb = if w[1] { Some(g.zip_map(&self.a, |x, y| x * y)?) } else { None };
        Ok(vec![ga, gb])
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

struct SumOp {
    shape: Vec<usize>,
}
impl<T: Scalar> Backward<T> for SumOp {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(&self.shape, g.item()?))])
    }
}

struct MseOp<T: Scalar> {
    diff: Tensor<T>,
}
impl<T: Scalar> Backward<T> for MseOp<T> {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let n = T::lit(self.diff.numel() as f64);
        let k = g.item()? * T::lit(2.0) / n;
        let ga = self.diff.scale(k);
        let gb = if w[1] { Some(ga.scale(-T::one())) } else { None };
        Ok(vec![w[0].then_some(ga), gb])
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

struct MatMulOp<T: Scalar> {
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
}
impl<T: Scalar> Backward<T> for MatMulOp<T> {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (m, k) = (self.a.shape()[0], self.a.shape()[1]);
        let n = self.b.shape()[1];
        let gm = MatRef::new(g.data(), m, n);
        let ga = if w[0] {
            let out = gemm_new(gm, MatRef::new(self.b.data(), k, n).t());
            Some(Tensor::new(vec![m, k], out)?)
        } else {
            None
        };
        let gb = if w[1] {
            let out = gemm_new(MatRef::new(self.a.data(), m, k).t(), gm);
            Some(Tensor::new(vec![k, n], out)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

// ---------------------------------------------------------------------------
// Model-specific fused ops
// ---------------------------------------------------------------------------

struct EmbeddingOp {
    ids: Vec<u32>,
    table_shape: Vec<usize>,
}
impl<T: Scalar> Backward<T> for EmbeddingOp {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let d = self.table_shape[1];
        let mut out = Tensor::zeros(&self.table_shape);
        let buf = out.data_mut();
        for (row, &id) in self.ids.iter().enumerate() {
            let dst = &mut buf[id as usize * d..(id as usize + 1) * d];
            for (o, &x) in dst.iter_mut().zip(&g.data()[row * d..(row + 1) * d]) {
                *o = *o + x;
            }
        }
        Ok(vec![Some(out)])
    }
}

struct RmsNormOp<T: Scalar> {
    x: Arc<Tensor<T>>,
    gain: Arc<Tensor<T>>,
    inv_rms: Vec<T>,
}
impl<T: Scalar> Backward<T> for RmsNormOp<T> {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let d = self.gain.numel();
        let gain = self.gain.data();
        let inv_d = T::one() / T::lit(d as f64);
        let mut gx = vec![T::zero(); self.x.numel()];
        let mut gg = vec![T::zero(); d];
        for (r, &inv) in self.inv_rms.iter().enumerate() {
            let xr = &self.x.data()[r * d..(r + 1) * d];
            let gr = &g.data()[r * d..(r + 1) * d];
            let mut proj = T::zero();
            for j in 0..d {
                proj = proj + gr[j] * gain[j] * xr[j];
                gg[j] = gg[j] + gr[j] * xr[j] * inv;
            }
            let k = proj * inv * inv * inv * inv_d;
            let out = &mut gx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = gr[j] * gain[j] * inv - xr[j] * k;
            }
        }
        Ok(vec![
            w[0].then(|| Tensor::new(self.x.shape().to_vec(), gx)).transpose()?,
            w[1].then(|| Tensor::new(self.gain.shape().to_vec(), gg)).transpose()?,
        ])
    }
}

/// Elementwise logistic function.
fn sigmoid_all<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut e: Vec<T> = x.iter().map(|&v| -v).collect();
    T::exp_in_place(&mut e);
    e.iter_mut().for_each(|v| *v = T::one() / (T::one() + *v));
    e
}

struct SwiGluOp<T: Scalar> {
    gate: Arc<Tensor<T>>,
    up: Arc<Tensor<T>>,
}
impl<T: Scalar> Backward<T> for SwiGluOp<T> {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let n = g.numel();
        let (a, b, gd) = (self.gate.data(), self.up.data(), g.data());
        let sig = sigmoid_all(a);
        let mut ga = vec![T::zero(); if w[0] { n } else { 0 }];
        let mut gb = vec![T::zero(); if w[1] { n } else { 0 }];
        for i in 0..n {
            let s = sig[i];
            if w[0] {
                let dsilu = s * (T::one() + a[i] * (T::one() - s));
                ga[i] = gd[i] * b[i] * dsilu;
            }
            if w[1] {
                gb[i] = gd[i] * a[i] * s;
            }
        }
        let shape = g.shape().to_vec();
        Ok(vec![
            w[0].then(|| Tensor::new(shape.clone(), ga)).transpose()?,
            w[1].then(|| Tensor::new(shape, gb)).transpose()?,
        ])
    }
}

struct CrossEntropyOp<T: Scalar> {
    logits: Arc<Tensor<T>>,
    targets: Vec<u32>,
}
impl<T: Scalar> Backward<T> for CrossEntropyOp<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let v = self.logits.last_dim();
        let n = self.targets.len();
        let scale = g.item()? / T::lit(n as f64);
        let mut out = self.logits.data().to_vec();
        for (r, &t) in self.targets.iter().enumerate() {
            let row = &mut out[r * v..(r + 1) * v];
            crate::tensor::softmax_in_place(row);
            row[t as usize] = row[t as usize] - T::one();
            for x in row.iter_mut() {
                *x = *x * scale;
            }
        }
        Ok(vec![Some(Tensor::new(self.logits.shape().to_vec(), out)?)])
    }
}

struct StackTokensOp {
    batch: usize,
    width: usize,
}
impl<T: Scalar> Backward<T> for StackTokensOp {
    fn backward(&self, g: &Tensor<T>, w: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let tokens = w.len();
        let (b, f) = (self.batch, self.width);
        let mut out = Vec::with_capacity(tokens);
        for (t, &wanted) in w.iter().enumerate() {
            if !wanted {
                out.push(None);
                continue;
            }
            let mut part = Vec::with_capacity(b * f);
            for bi in 0..b {
                let row = bi * tokens + t;
                part.extend_from_slice(&g.data()[row * f..(row + 1) * f]);
            }
            out.push(Some(Tensor::new(vec![b, f], part)?));
        }
        Ok(out)
    }
}

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn require_2d<T: Scalar>(x: &Var<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what} expects a 2-D tensor, got {s:?}")),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "add")?;
        Ok(self.record(a.value().add(b.value())?, &[a, b], AddOp))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "sub")?;
        Ok(self.record(a.value().sub(b.value())?, &[a, b], SubOp))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "mul")?;
        let out = a.value().zip_map(b.value(), |x, y| x * y)?;
        Ok(self.record(out, &[a, b], MulOp { a: a.value.clone(), b: b.value.clone() }))
    }

    pub fn scale(&self, a: &Var<T>, s: T) -> Var<T> {
        self.record(a.value().scale(s), &[a], ScaleOp(s))
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        self.record(Tensor::scalar(a.value().sum()), &[a], SumOp { shape: a.shape().to_vec() })
    }

    /// Mean squared elementwise difference.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Contract(format!(
                "mse: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let diff = a.value().sub(b.value())?;
        let n = T::lit(diff.numel().max(1) as f64);
        let value = Tensor::scalar(diff.sum_sq() / n);
        Ok(self.record(value, &[a, b], MseOp { diff }))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        require_2d(a, "matmul")?;
        require_2d(b, "matmul")?;
        let out = a.value().matmul(b.value())?;
        Ok(self.record(out, &[a, b], MatMulOp { a: a.value.clone(), b: b.value.clone() }))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&self, table: &Var<T>, ids: &[u32]) -> Result<Var<T>> {
        let (vocab, d) = require_2d(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Contract(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(table.value().row(id as usize));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.record(value, &[table], EmbeddingOp { ids: ids.to_vec(), table_shape: vec![vocab, d] }))
    }

    /// Root-mean-square normalization over the last dimension, times `gain`.
    pub fn rms_norm(&self, x: &Var<T>, gain: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = gain.value().numel();
        if x.value().last_dim() != d {
            return dim_err(format!("rms_norm: gain of {d} for input {:?}", x.shape()));
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let xs = x.value().data();
        let gs = gain.value().data();
        let rows = x.value().rows();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let xr = &xs[r * d..(r + 1) * d];
            let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gs) {
                *o = v * inv * g;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(value, &[x, gain], RmsNormOp { x: x.value.clone(), gain: gain.value.clone(), inv_rms }))
    }

    /// `silu(gate) * up`, elementwise.
    pub fn swiglu(&self, gate: &Var<T>, up: &Var<T>) -> Result<Var<T>> {
        same_shape(gate, up, "swiglu")?;
        let sig = sigmoid_all(gate.value().data());
        let out: Vec<T> =
            gate.value().data().iter().zip(up.value().data()).zip(&sig).map(|((&a, &b), &s)| a * s * b).collect();
        let out = Tensor::new(gate.shape().to_vec(), out)?;
        Ok(self.record(out, &[gate, up], SwiGluOp { gate: gate.value.clone(), up: up.value.clone() }))
    }

    /// Mean token-level cross entropy of `[n, vocab]` logits against `n` targets.
    pub fn cross_entropy(&self, logits: &Var<T>, targets: &[u32]) -> Result<Var<T>> {
        let (n, v) = require_2d(logits, "cross_entropy")?;
        if n != targets.len() || n == 0 {
            return dim_err(format!("cross_entropy: {n} rows vs {} targets", targets.len()));
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t as usize >= v {
                return Err(Error::Contract(format!("target {t} outside vocabulary of {v}")));
            }
            let row = logits.value().row(r);
            total = total + log_sum_exp(row) - row[t as usize];
        }
        let value = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.record(value, &[logits], CrossEntropyOp { logits: logits.value.clone(), targets: targets.to_vec() }))
    }

    /// Stacks per-token `[batch, f]` slices into a batch-major `[batch * tokens, f]`.
    pub fn stack_tokens(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::Contract("stack_tokens of nothing".into()))?;
        let (b, f) = require_2d(first, "stack_tokens")?;
        if parts.iter().any(|p| p.shape() != first.shape()) {
            return dim_err("stack_tokens: parts differ in shape");
        }
        let t = parts.len();
        let mut out = vec![T::zero(); b * t * f];
        for (ti, p) in parts.iter().enumerate() {
            for bi in 0..b {
                let row = bi * t + ti;
                out[row * f..(row + 1) * f].copy_from_slice(&p.value().data()[bi * f..(bi + 1) * f]);
            }
        }
        let value = Tensor::new(vec![b * t, f], out)?;
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(self.record(value, &refs, StackTokensOp { batch: b, width: f }))
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    /// `(param index, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar loss from the given parameter vars. At most
/// `max_coords` coordinates are sampled (all of them when fewer exist).
/// The error for one coordinate is `|analytic − numeric| / (|numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = params.iter().map(|p| tape.param(Arc::new(p.clone()))).collect();
    let loss = f(&tape, &vars)?;
    let analytic: Vec<Tensor<f64>> = {
        let grads = tape.backward(&loss)?;
        vars.iter().map(|v| grads.wrt(v)).collect()
    };

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<f64>> = ps.iter().map(|p| Var::constant(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective returned {v}")));
        }
        Ok(v)
    };

    let mut coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i))).collect();
    if coords.len() > max_coords {
        let mut rng = crate::tensor::SeededRng::new(seed);
        // Partial Fisher-Yates: the first `max_coords` entries become a uniform sample.
        for i in 0..max_coords {
            let j = i + rng.below(coords.len() - i);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates_checked: 0, worst: None };
    for &(p, i) in &coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[p].data()[i];
        let err = (a - numeric).abs() / (numeric.abs() + 1e-12);
        report.coordinates_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, i, a, numeric));
        }
    }
    Ok(report)
}
