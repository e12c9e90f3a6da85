//! Llama-style blocks: rotary embeddings, grouped-query attention with the
//! two causal mask kinds, RMSNorm and the SwiGLU MLP.
//!
//! Activations are 2-D. A batch of `B` sequences with `T` tokens each is
//! stored batch-major as `[B * T, features]` (row `b * T + t`). Key/value
//! inputs to attention may also be token-major (row `t * B + b`), which is
//! what the incremental caches use.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autograd::{Backward, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm_new, parallel_enabled, MatRef, Scalar, Tensor};

// ---------------------------------------------------------------------------
// Rotary embeddings
// ---------------------------------------------------------------------------

/// Precomputed rotation angles for the half-split rotary convention: the
/// pair rotated together is `(x[j], x[j + head_dim/2])`.
#[derive(Clone, Debug)]
pub struct RotaryTable<T> {
    head_dim: usize,
    base: f64,
    inv_freq: Vec<f64>,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotaryTable<T> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary embeddings need an even head_dim, got {head_dim}")));
        }
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64)).collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for &f in &inv_freq {
                let a = p as f64 * f;
                cos.push(T::lit(a.cos()));
                sin.push(T::lit(a.sin()));
            }
        }
        Ok(RotaryTable { head_dim, base, inv_freq, cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_positions(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    /// `(cos, sin)` for one position. Positions past the table are computed
    /// on the fly with the same formula, so long streaming runs keep
    /// absolute positions.
    fn angles(&self, pos: usize) -> (std::borrow::Cow<'_, [T]>, std::borrow::Cow<'_, [T]>) {
        use std::borrow::Cow;
        let half = self.head_dim / 2;
        if pos < self.max_positions() {
            let r = pos * half..(pos + 1) * half;
            (Cow::Borrowed(&self.cos[r.clone()]), Cow::Borrowed(&self.sin[r]))
        } else {
            let a: Vec<f64> = self.inv_freq.iter().map(|f| pos as f64 * f).collect();
            (
                Cow::Owned(a.iter().map(|x| T::lit(x.cos())).collect()),
                Cow::Owned(a.iter().map(|x| T::lit(x.sin())).collect()),
            )
        }
    }

    /// Rotates every head of every row; `inverse` rotates by the negated angle.
    fn rotate(&self, x: &[T], width: usize, row_positions: &[usize], inverse: bool) -> Vec<T> {
        let d = self.head_dim;
        let half = d / 2;
        let mut out = vec![T::zero(); x.len()];
        for (r, &pos) in row_positions.iter().enumerate() {
            let (cos, sin) = self.angles(pos);
            for h in 0..width / d {
                let base = r * width + h * d;
                for j in 0..half {
                    let (a, b) = (x[base + j], x[base + j + half]);
                    let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
                    out[base + j] = a * c - b * s;
                    out[base + j + half] = b * c + a * s;
                }
            }
        }
        out
    }

    /// Rotates a `[rows, heads * head_dim]` tensor, row `r` at `row_positions[r]`.
    pub fn apply(&self, x: &Tensor<T>, row_positions: &[usize]) -> Result<Tensor<T>> {
        self.check(x, row_positions)?;
        Tensor::new(x.shape().to_vec(), self.rotate(x.data(), x.last_dim(), row_positions, false))
    }

    pub fn apply_inverse(&self, x: &Tensor<T>, row_positions: &[usize]) -> Result<Tensor<T>> {
        self.check(x, row_positions)?;
        Tensor::new(x.shape().to_vec(), self.rotate(x.data(), x.last_dim(), row_positions, true))
    }

    fn check(&self, x: &Tensor<T>, row_positions: &[usize]) -> Result<()> {
        if x.shape().len() != 2 || x.last_dim() % self.head_dim != 0 {
            return dim_err(format!("rope: {:?} is not [rows, heads*{}]", x.shape(), self.head_dim));
        }
        if x.rows() != row_positions.len() {
            return dim_err(format!("rope: {} rows but {} positions", x.rows(), row_positions.len()));
        }
        Ok(())
    }
}

struct RopeOp<T> {
    table: Arc<RotaryTable<T>>,
    positions: Vec<usize>,
    width: usize,
}

impl<T: Scalar> Backward<T> for RopeOp<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let data = self.table.rotate(g.data(), self.width, &self.positions, true);
        Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
    }
}

/// Differentiable rotary embedding of a `[rows, heads * head_dim]` var.
pub fn apply_rope<T: Scalar>(
    tape: &Tape<T>,
    table: &Arc<RotaryTable<T>>,
    x: &Var<T>,
    row_positions: &[usize],
) -> Result<Var<T>> {
    let out = table.apply(x.value(), row_positions)?;
    let op = RopeOp { table: Arc::clone(table), positions: row_positions.to_vec(), width: x.value().last_dim() };
    Ok(tape.record(out, &[x], op))
}

/// Row positions of a batch-major `[batch * tokens, _]` activation.
pub fn batch_major_positions(positions: &[usize], batch: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| positions.iter().copied()).collect()
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Query at position p sees keys at positions ≤ p.
    CausalWithSelf,
    /// Query at position p sees keys at positions < p. A query with no such
    /// key reads a zero dummy key/value and outputs zero.
    CausalNoSelf,
}

/// Causal mask over absolute positions, optionally intersected with an
/// explicit `[queries, keys]` boolean matrix.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub q_positions: Vec<usize>,
    pub k_positions: Vec<usize>,
    pub extra: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn new(kind: MaskKind, q_positions: Vec<usize>, k_positions: Vec<usize>) -> Self {
        AttentionMask { kind, q_positions, k_positions, extra: None }
    }

    pub fn len(&self) -> usize {
        self.q_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_positions.is_empty()
    }

    pub fn kv_len(&self) -> usize {
        self.k_positions.len()
    }

    pub fn allows(&self, qi: usize, kj: usize) -> bool {
        let (qp, kp) = (self.q_positions[qi], self.k_positions[kj]);
        let causal = match self.kind {
            MaskKind::CausalWithSelf => kp <= qp,
            MaskKind::CausalNoSelf => kp < qp,
        };
        causal && self.extra.as_ref().is_none_or(|m| m[qi * self.kv_len() + kj])
    }

    fn matrix(&self) -> Vec<bool> {
        let (nq, nk) = (self.len(), self.kv_len());
        let mut m = Vec::with_capacity(nq * nk);
        for i in 0..nq {
            for j in 0..nk {
                m.push(self.allows(i, j));
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvLayout {
    /// Row `b * tokens + t`.
    BatchMajor,
    /// Row `t * batch + b`.
    TokenMajor,
    /// Row `b * capacity + t`; slots past `tokens` are unused.
    Padded { capacity: usize },
}

/// A run of key/value rows, `[batch * tokens, n_kv_heads * head_dim]` each.
#[derive(Clone, Debug)]
pub struct KvSegment<T: Scalar> {
    pub k: Var<T>,
    pub v: Var<T>,
    pub tokens: usize,
    pub layout: KvLayout,
}

impl<T: Scalar> KvSegment<T> {
    pub fn new(k: Var<T>, v: Var<T>, tokens: usize, layout: KvLayout) -> Self {
        KvSegment { k, v, tokens, layout }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionSpec {
    fn rep(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

struct SavedSegment<T> {
    k: Arc<Tensor<T>>,
    v: Arc<Tensor<T>>,
    tokens: usize,
    layout: KvLayout,
}

/// Below either bound attention skips the matrix kernels, whose packing
/// overhead dominates on small blocks.
const DIRECT_ROWS: usize = 8;
const DIRECT_SCORES: usize = 2048;

/// Dot product with eight independent partial sums, which vectorizes.
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Everything the per-(batch, kv-head) kernels need.
struct AttnProblem<T> {
    spec: AttentionSpec,
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
    q: Arc<Tensor<T>>,
    segments: Vec<SavedSegment<T>>,
    scale: T,
}

/// Per-(batch, kv-head) forward result.
struct PairOut<T> {
    out: Vec<T>,
    lse: Vec<T>,
}

/// Per-(batch, kv-head) backward result.
struct PairGrad<T> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
}

impl<T: Scalar> AttnProblem<T> {
    fn pairs(&self) -> Vec<(usize, usize)> {
        let s = &self.spec;
        (0..s.batch).flat_map(|b| (0..s.n_kv_heads).map(move |g| (b, g))).collect()
    }

    fn map_pairs<R: Send>(&self, f: impl Fn(usize, usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
        let pairs = self.pairs();
        // Each pair is computed independently, so results are bitwise equal
        // whether or not the loop runs on several threads.
        let work = self.n_q * self.n_k * self.spec.head_dim * self.spec.rep();
        if parallel_enabled() && pairs.len() > 1 && work >= 1 << 14 {
            pairs.par_iter().map(|&(b, g)| f(b, g)).collect()
        } else {
            pairs.iter().map(|&(b, g)| f(b, g)).collect()
        }
    }

    /// `[rep * n_q, head_dim]` queries of the heads sharing kv-head `g`.
    fn gather_q(&self, src: &[T], b: usize, g: usize) -> Vec<T> {
        let s = &self.spec;
        let (d, width) = (s.head_dim, s.n_heads * s.head_dim);
        let mut out = Vec::with_capacity(s.rep() * self.n_q * d);
        for r in 0..s.rep() {
            let h = g * s.rep() + r;
            for t in 0..self.n_q {
                let row = (b * self.n_q + t) * width + h * d;
                out.extend_from_slice(&src[row..row + d]);
            }
        }
        out
    }

    fn scatter_q(&self, dst: &mut [T], src: &[T], b: usize, g: usize) {
        let s = &self.spec;
        let (d, width) = (s.head_dim, s.n_heads * s.head_dim);
        for r in 0..s.rep() {
            let h = g * s.rep() + r;
            for t in 0..self.n_q {
                let row = (b * self.n_q + t) * width + h * d;
                let i = (r * self.n_q + t) * d;
                dst[row..row + d].copy_from_slice(&src[i..i + d]);
            }
        }
    }

    /// `[n_k, head_dim]` keys (or values) for one batch entry and kv-head.
    fn gather_kv(&self, b: usize, g: usize, pick_v: bool) -> Vec<T> {
        let s = &self.spec;
        let d = s.head_dim;
        let width = s.n_kv_heads * d;
        let mut out = Vec::with_capacity(self.n_k * d);
        for seg in &self.segments {
            let src = if pick_v { seg.v.data() } else { seg.k.data() };
            for t in 0..seg.tokens {
                let row = Self::segment_row(seg, b, t, s.batch) * width + g * d;
                out.extend_from_slice(&src[row..row + d]);
            }
        }
        out
    }

    fn segment_row(seg: &SavedSegment<T>, b: usize, t: usize, batch: usize) -> usize {
        match seg.layout {
            KvLayout::BatchMajor => b * seg.tokens + t,
            KvLayout::TokenMajor => t * batch + b,
            KvLayout::Padded { capacity } => b * capacity + t,
        }
    }

    /// Scaled logits `Q·Kᵀ · scale`, `[rep * n_q, n_k]`.
    fn scores(&self, qg: &[T], kg: &[T]) -> Vec<T> {
        let rows = self.spec.rep() * self.n_q;
        let d = self.spec.head_dim;
        let mut s = gemm_new(MatRef::new(qg, rows, d), MatRef::new(kg, self.n_k, d).t());
        for x in s.iter_mut() {
            *x = *x * self.scale;
        }
        s
    }

    fn forward_pair(&self, b: usize, g: usize) -> Result<PairOut<T>> {
        let d = self.spec.head_dim;
        let rows = self.spec.rep() * self.n_q;
        if rows <= DIRECT_ROWS || rows * self.n_k <= DIRECT_SCORES {
            return Ok(self.forward_pair_direct(b, g));
        }
        let qg = self.gather_q(self.q.data(), b, g);
        let kg = self.gather_kv(b, g, false);
        let vg = self.gather_kv(b, g, true);
        let mut p = self.scores(&qg, &kg);
        let lse = self.softmax_rows(&mut p);
        let out = gemm_new(MatRef::new(&p, rows, self.n_k), MatRef::new(&vg, self.n_k, d));
        Ok(PairOut { out, lse })
    }

    /// Small blocks (single-token decoding, short prompts): dot products and
    /// weighted sums read the key/value rows in place instead of gathering them.
    fn forward_pair_direct(&self, b: usize, g: usize) -> PairOut<T> {
        let d = self.spec.head_dim;
        let rows = self.spec.rep() * self.n_q;
        let width = self.spec.n_kv_heads * d;
        let qg = self.gather_q(self.q.data(), b, g);
        let key_rows = || {
            self.segments.iter().flat_map(move |seg| {
                (0..seg.tokens).map(move |t| (seg, (Self::segment_row(seg, b, t, self.spec.batch) * width + g * d)))
            })
        };
        let mut p = vec![T::zero(); rows * self.n_k];
        for (j, (seg, at)) in key_rows().enumerate() {
            let k = &seg.k.data()[at..at + d];
            for i in 0..rows {
                p[i * self.n_k + j] = dot_lanes(&qg[i * d..(i + 1) * d], k) * self.scale;
            }
        }
        let lse = self.softmax_rows(&mut p);
        let mut out = vec![T::zero(); rows * d];
        for (j, (seg, at)) in key_rows().enumerate() {
            let v = &seg.v.data()[at..at + d];
            for i in 0..rows {
                let w = p[i * self.n_k + j];
                for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(v) {
                    *o = *o + w * x;
                }
            }
        }
        PairOut { out, lse }
    }

    /// Masks, then turns each row of scores into probabilities in place.
    /// Returns the log-sum-exp per row (`-inf` for a row with no visible key).
    fn softmax_rows(&self, p: &mut [T]) -> Vec<T> {
        let rows = self.spec.rep() * self.n_q;
        let mut lse = vec![T::neg_infinity(); rows];
        for i in 0..rows {
            let t = i % self.n_q;
            let allowed = &self.allowed[t * self.n_k..(t + 1) * self.n_k];
            let row = &mut p[i * self.n_k..(i + 1) * self.n_k];
            for (x, &ok) in row.iter_mut().zip(allowed) {
                *x = if ok { *x } else { T::neg_infinity() };
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                // Only the zero dummy slot is visible: the output row is zero.
                row.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            row.iter_mut().for_each(|x| *x = *x - max);
            T::exp_in_place(row);
            let sum: T = row.iter().copied().sum();
            let inv = T::one() / sum;
            row.iter_mut().for_each(|x| *x = *x * inv);
            lse[i] = max + sum.ln();
        }
        lse
    }

    fn backward_pair(&self, b: usize, g: usize, lse: &[T], out: &[T], grad: &[T]) -> Result<PairGrad<T>> {
        let d = self.spec.head_dim;
        let rows = self.spec.rep() * self.n_q;
        let n_k = self.n_k;
        let qg = self.gather_q(self.q.data(), b, g);
        let kg = self.gather_kv(b, g, false);
        let vg = self.gather_kv(b, g, true);
        let og = self.gather_q(out, b, g);
        let dog = self.gather_q(grad, b, g);
        let lse_g = &lse[(b * self.spec.n_kv_heads + g) * rows..][..rows];

        let mut p = self.scores(&qg, &kg);
        for i in 0..rows {
            let t = i % self.n_q;
            let allowed = &self.allowed[t * n_k..(t + 1) * n_k];
            let row = &mut p[i * n_k..(i + 1) * n_k];
            if lse_g[i] == T::neg_infinity() {
                row.iter_mut().for_each(|x| *x = T::zero());
            } else {
                for (x, &ok) in row.iter_mut().zip(allowed) {
                    *x = if ok { *x - lse_g[i] } else { T::neg_infinity() };
                }
                T::exp_in_place(row);
            }
        }
        let dv = gemm_new(MatRef::new(&p, rows, n_k).t(), MatRef::new(&dog, rows, d));
        let mut ds = gemm_new(MatRef::new(&dog, rows, d), MatRef::new(&vg, n_k, d).t());
        for i in 0..rows {
            let delta = crate::tensor::dot(&dog[i * d..(i + 1) * d], &og[i * d..(i + 1) * d]);
            for j in 0..n_k {
                let k = i * n_k + j;
                ds[k] = p[k] * (ds[k] - delta) * self.scale;
            }
        }
        let dq = gemm_new(MatRef::new(&ds, rows, n_k), MatRef::new(&kg, n_k, d));
        let dk = gemm_new(MatRef::new(&ds, rows, n_k).t(), MatRef::new(&qg, rows, d));
        Ok(PairGrad { dq, dk, dv })
    }

    /// Adds a `[n_k, head_dim]` block into per-segment gradient buffers.
    fn scatter_kv(&self, dst: &mut [Vec<T>], src: &[T], b: usize, g: usize) {
        let d = self.spec.head_dim;
        let width = self.spec.n_kv_heads * d;
        let mut j = 0;
        for (seg, buf) in self.segments.iter().zip(dst.iter_mut()) {
            for t in 0..seg.tokens {
                let row = Self::segment_row(seg, b, t, self.spec.batch) * width + g * d;
                buf[row..row + d].copy_from_slice(&src[j * d..(j + 1) * d]);
                j += 1;
            }
        }
    }
}

struct AttentionOp<T> {
    problem: AttnProblem<T>,
    out: Tensor<T>,
    lse: Vec<T>,
}

impl<T: Scalar> Backward<T> for AttentionOp<T> {
    fn backward(&self, grad: &Tensor<T>, wanted: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let pb = &self.problem;
        let grads = pb.map_pairs(|b, g| pb.backward_pair(b, g, &self.lse, self.out.data(), grad.data()))?;
        let mut dq = vec![T::zero(); pb.q.numel()];
        let mut dk: Vec<Vec<T>> = pb.segments.iter().map(|s| vec![T::zero(); s.k.numel()]).collect();
        let mut dv: Vec<Vec<T>> = pb.segments.iter().map(|s| vec![T::zero(); s.v.numel()]).collect();
        for ((b, g), pg) in pb.pairs().into_iter().zip(grads) {
            pb.scatter_q(&mut dq, &pg.dq, b, g);
            pb.scatter_kv(&mut dk, &pg.dk, b, g);
            pb.scatter_kv(&mut dv, &pg.dv, b, g);
        }
        let mut out = Vec::with_capacity(wanted.len());
        out.push(wanted[0].then(|| Tensor::new(pb.q.shape().to_vec(), dq)).transpose()?);
        for (i, (seg, (k, v))) in pb.segments.iter().zip(dk.into_iter().zip(dv)).enumerate() {
            out.push(wanted[1 + 2 * i].then(|| Tensor::new(seg.k.shape().to_vec(), k)).transpose()?);
            out.push(wanted[2 + 2 * i].then(|| Tensor::new(seg.v.shape().to_vec(), v)).transpose()?);
        }
        Ok(out)
    }
}

/// Scaled dot-product attention with grouped key/value heads.
///
/// `q` is batch-major `[batch * n_q, n_heads * head_dim]`; the key/value
/// segments are concatenated in order along the key axis and must supply
/// `mask.kv_len()` tokens in total. Returns `[batch * n_q, n_heads * head_dim]`.
pub fn attention<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    segments: &[KvSegment<T>],
    spec: AttentionSpec,
    mask: &AttentionMask,
) -> Result<Var<T>> {
    let AttentionSpec { batch, n_heads, n_kv_heads, head_dim } = spec;
    if n_kv_heads == 0 || n_heads % n_kv_heads != 0 {
        return Err(Error::Config(format!("{n_heads} query heads cannot share {n_kv_heads} kv heads")));
    }
    let n_q = mask.len();
    if q.shape() != [batch * n_q, n_heads * head_dim] {
        return dim_err(format!(
            "attention: queries {:?}, expected [{}, {}]",
            q.shape(),
            batch * n_q,
            n_heads * head_dim
        ));
    }
    let kv_width = n_kv_heads * head_dim;
    let mut n_k = 0;
    for seg in segments {
        let rows = match seg.layout {
            KvLayout::Padded { capacity } if seg.tokens > capacity => {
                return dim_err(format!("attention: {} tokens in a segment of capacity {capacity}", seg.tokens));
            }
            KvLayout::Padded { capacity } => batch * capacity,
            _ => batch * seg.tokens,
        };
        let want = [rows, kv_width];
        if seg.k.shape() != want || seg.v.shape() != want {
            return dim_err(format!(
                "attention: kv segment {:?}/{:?}, expected {want:?}",
                seg.k.shape(),
                seg.v.shape()
            ));
        }
        n_k += seg.tokens;
    }
    if n_k != mask.kv_len() {
        return dim_err(format!("attention: {n_k} keys but mask covers {}", mask.kv_len()));
    }
    if let Some(extra) = &mask.extra {
        if extra.len() != n_q * n_k {
            return dim_err(format!("attention: explicit mask of {} entries for {n_q}x{n_k}", extra.len()));
        }
    }
    let allowed = mask.matrix();
    if mask.kind == MaskKind::CausalWithSelf {
        if let Some(t) = (0..n_q).find(|&t| !allowed[t * n_k..(t + 1) * n_k].contains(&true)) {
            return Err(Error::Contract(format!(
                "query at position {} has no visible key and no dummy slot",
                mask.q_positions[t]
            )));
        }
    }

    let problem = AttnProblem {
        spec,
        n_q,
        n_k,
        allowed,
        q: Arc::clone(q.value_arc()),
        segments: segments
            .iter()
            .map(|s| SavedSegment {
                k: Arc::clone(s.k.value_arc()),
                v: Arc::clone(s.v.value_arc()),
                tokens: s.tokens,
                layout: s.layout,
            })
            .collect(),
        scale: T::one() / T::lit(head_dim as f64).sqrt(),
    };
    let results = problem.map_pairs(|b, g| problem.forward_pair(b, g))?;
    let mut out = vec![T::zero(); batch * n_q * n_heads * head_dim];
    let mut lse = Vec::with_capacity(batch * n_heads * n_q);
    for ((b, g), r) in problem.pairs().into_iter().zip(results) {
        problem.scatter_q(&mut out, &r.out, b, g);
        lse.extend(r.lse);
    }
    let out = Tensor::new(vec![batch * n_q, n_heads * head_dim], out)?;

    let mut inputs: Vec<&Var<T>> = vec![q];
    for s in segments {
        inputs.push(&s.k);
        inputs.push(&s.v);
    }
    if !tape.is_recording() || inputs.iter().all(|v| !v.is_tracked()) {
        return Ok(Var::constant(out));
    }
    let saved = out.clone();
    Ok(tape.record(out, &inputs, AttentionOp { problem, out: saved, lse }))
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

/// Per-layer parameters. `W` is the storage type: shared tensors for a
/// model, [`Var`]s once bound to a tape, plain tensors for gradients.
///
/// Linear maps use the `y = x · W` convention with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<W> {
    pub wq: W,
    /// Absent on condensed layers.
    pub wk: Option<W>,
    pub wv: Option<W>,
    pub wo: W,
    pub w_gate: W,
    pub w_up: W,
    pub w_down: W,
    pub attn_norm: W,
    pub mlp_norm: W,
}

impl<W> LayerWeights<W> {
    pub fn has_kv(&self) -> bool {
        self.wk.is_some() && self.wv.is_some()
    }

    /// Visits `(name, value)` in a fixed order; absent projections are skipped.
    pub fn named(&self) -> Vec<(&'static str, &W)> {
        let mut out = vec![("wq", &self.wq)];
        if let Some(w) = &self.wk {
            out.push(("wk", w));
        }
        if let Some(w) = &self.wv {
            out.push(("wv", w));
        }
        out.extend([
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
            ("attn_norm", &self.attn_norm),
            ("mlp_norm", &self.mlp_norm),
        ]);
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &W) -> Result<U, E>) -> Result<LayerWeights<U>, E> {
        Ok(LayerWeights {
            wq: f("wq", &self.wq)?,
            wk: self.wk.as_ref().map(|w| f("wk", w)).transpose()?,
            wv: self.wv.as_ref().map(|w| f("wv", w)).transpose()?,
            wo: f("wo", &self.wo)?,
            w_gate: f("w_gate", &self.w_gate)?,
            w_up: f("w_up", &self.w_up)?,
            w_down: f("w_down", &self.w_down)?,
            attn_norm: f("attn_norm", &self.attn_norm)?,
            mlp_norm: f("mlp_norm", &self.mlp_norm)?,
        })
    }
}

/// Shape information shared by all blocks of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockGeometry {
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub intermediate_size: usize,
    pub rms_norm_eps: f64,
}

impl BlockGeometry {
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn attention_spec(&self, batch: usize) -> AttentionSpec {
        AttentionSpec { batch, n_heads: self.n_heads, n_kv_heads: self.n_kv_heads, head_dim: self.head_dim }
    }

    /// Random layer with normal(0, std) projections and unit norm gains.
    pub fn init_layer<T: Scalar>(
        &self,
        with_kv: bool,
        std: f64,
        rng: &mut crate::tensor::SeededRng,
    ) -> LayerWeights<Arc<Tensor<T>>> {
        let d = self.hidden_size;
        let qw = self.n_heads * self.head_dim;
        let mut w = |r: usize, c: usize| Arc::new(Tensor::randn(&[r, c], std, rng));
        let wq = w(d, qw);
        let (wk, wv) = if with_kv {
            (Some(w(d, self.kv_width())), Some(w(d, self.kv_width())))
        } else {
            (None, None)
        };
        LayerWeights {
            wq,
            wk,
            wv,
            wo: w(qw, d),
            w_gate: w(d, self.intermediate_size),
            w_up: w(d, self.intermediate_size),
            w_down: w(self.intermediate_size, d),
            attn_norm: Arc::new(Tensor::ones(&[d])),
            mlp_norm: Arc::new(Tensor::ones(&[d])),
        }
    }

    /// Checks every projection shape against the geometry.
    pub fn check_layer<T: Scalar>(&self, layer: &LayerWeights<Arc<Tensor<T>>>) -> Result<()> {
        let d = self.hidden_size;
        let qw = self.n_heads * self.head_dim;
        let kw = self.kv_width();
        let i = self.intermediate_size;
        let expect: [(&str, Option<&Arc<Tensor<T>>>, Vec<usize>); 9] = [
            ("wq", Some(&layer.wq), vec![d, qw]),
            ("wk", layer.wk.as_ref(), vec![d, kw]),
            ("wv", layer.wv.as_ref(), vec![d, kw]),
            ("wo", Some(&layer.wo), vec![qw, d]),
            ("w_gate", Some(&layer.w_gate), vec![d, i]),
            ("w_up", Some(&layer.w_up), vec![d, i]),
            ("w_down", Some(&layer.w_down), vec![i, d]),
            ("attn_norm", Some(&layer.attn_norm), vec![d]),
            ("mlp_norm", Some(&layer.mlp_norm), vec![d]),
        ];
        for (name, t, shape) in expect {
            if let Some(t) = t {
                if t.shape() != shape.as_slice() {
                    return dim_err(format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
                }
            }
        }
        if layer.wk.is_some() != layer.wv.is_some() {
            return Err(Error::Config("wk and wv must be both present or both absent".into()));
        }
        Ok(())
    }
}

/// Where a block's attention reads keys and values from.
pub enum KvSource<'a, T: Scalar> {
    /// Standard self-attention: the block projects its own keys/values for
    /// the current tokens and attends over `past` followed by them.
    Own { past: &'a [KvSegment<T>], past_positions: &'a [usize] },
    /// Condensed attention over externally supplied keys/values, excluding
    /// each query's own position.
    External { segments: &'a [KvSegment<T>], positions: &'a [usize] },
}

pub struct BlockOutput<T: Scalar> {
    pub h: Var<T>,
    /// Rotated keys and values of the current tokens (batch-major), only
    /// for [`KvSource::Own`].
    pub kv: Option<(Var<T>, Var<T>)>,
}

/// Pre-norm residual block: `h + attn(norm(h))`, then `+ mlp(norm(·))`.
///
/// `h` is batch-major `[batch * positions.len(), hidden]`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<T: Scalar>(
    tape: &Tape<T>,
    w: &LayerWeights<Var<T>>,
    geo: &BlockGeometry,
    rope: &Arc<RotaryTable<T>>,
    h: &Var<T>,
    batch: usize,
    positions: &[usize],
    source: KvSource<'_, T>,
) -> Result<BlockOutput<T>> {
    let rows = batch * positions.len();
    if h.shape() != [rows, geo.hidden_size] {
        return dim_err(format!("block input {:?}, expected [{rows}, {}]", h.shape(), geo.hidden_size));
    }
    let row_pos = batch_major_positions(positions, batch);
    let x = tape.rms_norm(h, &w.attn_norm, geo.rms_norm_eps)?;
    let q = apply_rope(tape, rope, &tape.matmul(&x, &w.wq)?, &row_pos)?;
    let spec = geo.attention_spec(batch);

    let (attn, kv) = match source {
        KvSource::Own { past, past_positions } => {
            let (Some(wk), Some(wv)) = (&w.wk, &w.wv) else {
                return Err(Error::Config("self-attention source on a layer without key/value projections".into()));
            };
            let k = apply_rope(tape, rope, &tape.matmul(&x, wk)?, &row_pos)?;
            let v = tape.matmul(&x, wv)?;
            let mut segs = past.to_vec();
            segs.push(KvSegment::new(k.clone(), v.clone(), positions.len(), KvLayout::BatchMajor));
            let mut kpos = past_positions.to_vec();
            kpos.extend_from_slice(positions);
            let mask = AttentionMask::new(MaskKind::CausalWithSelf, positions.to_vec(), kpos);
            (attention(tape, &q, &segs, spec, &mask)?, Some((k, v)))
        }
        KvSource::External { segments, positions: kpos } => {
            if w.has_kv() {
                return Err(Error::Config("external key/value source on a layer with its own projections".into()));
            }
            let mask = AttentionMask::new(MaskKind::CausalNoSelf, positions.to_vec(), kpos.to_vec());
            (attention(tape, &q, segments, spec, &mask)?, None)
        }
    };

    let h = tape.add(h, &tape.matmul(&attn, &w.wo)?)?;
    let x = tape.rms_norm(&h, &w.mlp_norm, geo.rms_norm_eps)?;
    let act = tape.swiglu(&tape.matmul(&x, &w.w_gate)?, &tape.matmul(&x, &w.w_up)?)?;
    let h = tape.add(&h, &tape.matmul(&act, &w.w_down)?)?;
    Ok(BlockOutput { h, kv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check;
    use crate::tensor::SeededRng;

    fn rope64(d: usize) -> Arc<RotaryTable<f64>> {
        Arc::new(RotaryTable::new(d, 64, 10000.0).unwrap())
    }

    /// Per-position loop: for each query, softmax over allowed keys, weighted
    /// sum of values. Token-major K/V of `n_k` rows, one batch entry.
    fn naive_attention(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        spec: AttentionSpec,
        mask: &AttentionMask,
    ) -> Tensor<f64> {
        let d = spec.head_dim;
        let rep = spec.n_heads / spec.n_kv_heads;
        let (n_q, n_k) = (mask.len(), mask.kv_len());
        let mut out = Tensor::zeros(&[n_q, spec.n_heads * d]);
        for h in 0..spec.n_heads {
            let g = h / rep;
            for i in 0..n_q {
                let qi = &q.row(i)[h * d..(h + 1) * d];
                let mut logits = Vec::new();
                for j in 0..n_k {
                    if mask.allows(i, j) {
                        let kj = &k.row(j)[g * d..(g + 1) * d];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                        logits.push((j, s));
                    }
                }
                let max = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x.1 - max).exp()).sum();
                for (j, s) in logits {
                    let p = (s - max).exp() / z;
                    for e in 0..d {
                        out.data_mut()[i * spec.n_heads * d + h * d + e] += p * v.row(j)[g * d + e];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let table = rope64(8);
        let mut rng = SeededRng::new(1);
        let x = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng);
        assert_eq!(table.apply(&x, &[0]).unwrap(), x);
    }

    #[test]
    fn rope_preserves_pair_norms_and_inverts() {
        let table = rope64(8);
        let mut rng = SeededRng::new(2);
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let pos = [1, 17, 40];
        let y = table.apply(&x, &pos).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                let n0 = x.row(r)[j].hypot(x.row(r)[j + 4]);
                let n1 = y.row(r)[j].hypot(y.row(r)[j + 4]);
                assert!((n0 - n1).abs() < 1e-6);
            }
        }
        let back = table.apply_inverse(&y, &pos).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
        // Past the precomputed range the formula is the same.
        let far = table.apply(&x, &[100, 200, 300]).unwrap();
        let wide = RotaryTable::<f64>::new(8, 400, 10000.0).unwrap().apply(&x, &[100, 200, 300]).unwrap();
        assert_eq!(far, wide);
    }

    #[test]
    fn rope_dot_depends_on_offset_only() {
        let table = rope64(16);
        let mut rng = SeededRng::new(3);
        let q = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng);
        let dot = |i: usize, j: usize| {
            let a = table.apply(&q, &[i]).unwrap();
            let b = table.apply(&k, &[j]).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(5, 3) - dot(7, 5)).abs() < 1e-5);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        assert!(matches!(RotaryTable::<f32>::new(7, 4, 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn single_dummy_slot_gives_zero() {
        let tape = Tape::<f64>::no_grad();
        let spec = AttentionSpec { batch: 1, n_heads: 2, n_kv_heads: 1, head_dim: 4 };
        let q = Var::constant(Tensor::ones(&[1, 8]));
        let mask = AttentionMask::new(MaskKind::CausalNoSelf, vec![0], vec![]);
        let out = attention(&tape, &q, &[], spec, &mask).unwrap();
        assert!(out.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn no_self_second_token_reads_first_value() {
        let tape = Tape::<f64>::no_grad();
        let spec = AttentionSpec { batch: 1, n_heads: 1, n_kv_heads: 1, head_dim: 2 };
        let q = Var::constant(Tensor::from_rows(&[&[0.3, 1.0], &[-2.0, 0.5]]).unwrap());
        let k = Var::constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]).unwrap());
        let v = Var::constant(Tensor::from_rows(&[&[5.0, -6.0], &[7.0, 8.0]]).unwrap());
        let seg = KvSegment::new(k, v, 2, KvLayout::BatchMajor);
        let mask = AttentionMask::new(MaskKind::CausalNoSelf, vec![0, 1], vec![0, 1]);
        let out = attention(&tape, &q, &[seg], spec, &mask).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0, 5.0, -6.0]);
    }

    #[test]
    fn causal_attention_matches_naive_loop() {
        let mut rng = SeededRng::new(4);
        let spec = AttentionSpec { batch: 1, n_heads: 4, n_kv_heads: 2, head_dim: 4 };
        let q = Tensor::<f64>::randn(&[4, 16], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        for kind in [MaskKind::CausalWithSelf, MaskKind::CausalNoSelf] {
            let mask = AttentionMask::new(kind, vec![0, 1, 2, 3], vec![0, 1, 2, 3]);
            let seg = KvSegment::new(Var::constant(k.clone()), Var::constant(v.clone()), 4, KvLayout::BatchMajor);
            let fast = attention(&Tape::no_grad(), &Var::constant(q.clone()), &[seg], spec, &mask).unwrap();
            let slow = naive_attention(&q, &k, &v, spec, &mask);
            assert!(fast.value().max_abs_diff(&slow).unwrap() < 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn layouts_and_segmentation_agree() {
        let mut rng = SeededRng::new(5);
        let spec = AttentionSpec { batch: 2, n_heads: 2, n_kv_heads: 2, head_dim: 4 };
        let q = Var::constant(Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng));
        // Batch-major keys for 3 tokens, then the same rows token-major and
        // split into two segments.
        let k = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let mask = AttentionMask::new(MaskKind::CausalWithSelf, vec![4, 5, 6], vec![4, 5, 6]);
        let whole = KvSegment::new(Var::constant(k.clone()), Var::constant(v.clone()), 3, KvLayout::BatchMajor);
        let a = attention(&Tape::no_grad(), &q, &[whole], spec, &mask).unwrap();

        let tm = |t: &Tensor<f64>, rows: &[usize]| Var::constant(t.select_rows(rows).unwrap());
        let s1 = KvSegment::new(tm(&k, &[0, 3]), tm(&v, &[0, 3]), 1, KvLayout::TokenMajor);
        let s2 = KvSegment::new(tm(&k, &[1, 2, 4, 5]), tm(&v, &[1, 2, 4, 5]), 2, KvLayout::BatchMajor);
        let b = attention(&Tape::no_grad(), &q, &[s1, s2], spec, &mask).unwrap();
        assert!(a.value().max_abs_diff(b.value()).unwrap() < 1e-12);

        // Padded blocks of 5 slots per sequence; the unused slots hold noise.
        let pad = |t: &Tensor<f64>, rng: &mut SeededRng| {
            let mut out = Tensor::<f64>::randn(&[10, 8], 100.0, rng);
            for b in 0..2 {
                for s in 0..3 {
                    out.data_mut()[(b * 5 + s) * 8..][..8].copy_from_slice(t.row(b * 3 + s));
                }
            }
            Var::constant(out)
        };
        let padded = KvSegment::new(pad(&k, &mut rng), pad(&v, &mut rng), 3, KvLayout::Padded { capacity: 5 });
        let c = attention(&Tape::no_grad(), &q, &[padded], spec, &mask).unwrap();
        assert!(a.value().max_abs_diff(c.value()).unwrap() < 1e-12);
    }

    #[test]
    fn with_self_rejects_empty_rows() {
        let spec = AttentionSpec { batch: 1, n_heads: 1, n_kv_heads: 1, head_dim: 2 };
        let q = Var::constant(Tensor::<f64>::ones(&[1, 2]));
        let mask = AttentionMask::new(MaskKind::CausalWithSelf, vec![0], vec![]);
        assert!(matches!(attention(&Tape::no_grad(), &q, &[], spec, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn gqa_with_equal_heads_is_multi_head() {
        let mut rng = SeededRng::new(6);
        let spec = AttentionSpec { batch: 1, n_heads: 3, n_kv_heads: 3, head_dim: 2 };
        let q = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let mask = AttentionMask::new(MaskKind::CausalWithSelf, (0..5).collect(), (0..5).collect());
        let seg = KvSegment::new(Var::constant(k.clone()), Var::constant(v.clone()), 5, KvLayout::BatchMajor);
        let out = attention(&Tape::no_grad(), &Var::constant(q.clone()), &[seg], spec, &mask).unwrap();
        // Each head on its own, one at a time.
        for h in 0..3 {
            let cols = |t: &Tensor<f64>| {
                Tensor::from_fn(&[5, 2], |i| t.data()[(i / 2) * 6 + h * 2 + i % 2])
            };
            let one = AttentionSpec { batch: 1, n_heads: 1, n_kv_heads: 1, head_dim: 2 };
            let single = naive_attention(&cols(&q), &cols(&k), &cols(&v), one, &mask);
            assert!(cols(out.value()).max_abs_diff(&single).unwrap() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(7);
        let spec = AttentionSpec { batch: 2, n_heads: 4, n_kv_heads: 2, head_dim: 4 };
        let q = Tensor::<f64>::randn(&[6, 16], 1.0, &mut rng);
        let k1 = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let v1 = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let k2 = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let v2 = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(&[6, 16], 1.0, &mut rng);
        for kind in [MaskKind::CausalWithSelf, MaskKind::CausalNoSelf] {
            let report = finite_diff_check(
                |t, p| {
                    let segs = [
                        KvSegment::new(p[1].clone(), p[2].clone(), 1, KvLayout::TokenMajor),
                        KvSegment::new(p[3].clone(), p[4].clone(), 3, KvLayout::BatchMajor),
                    ];
                    // Every row sees at least two keys, so no gradient is structurally zero.
                    let mask = AttentionMask::new(kind, vec![2, 3, 4], vec![0, 1, 2, 3]);
                    let o = attention(t, &p[0], &segs, spec, &mask)?;
                    Ok(t.sum(&t.mul(&o, &Var::constant(probe.clone()))?))
                },
                &[q.clone(), k1.clone(), v1.clone(), k2.clone(), v2.clone()],
                1e-5,
                400,
                8,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{kind:?} {report:?}");
        }
    }

    #[test]
    fn rope_gradient() {
        let table = rope64(4);
        let mut rng = SeededRng::new(9);
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let report = finite_diff_check(
            |t, p| {
                let y = apply_rope(t, &table, &p[0], &[2, 9, 30])?;
                Ok(t.sum(&t.mul(&y, &Var::constant(probe.clone()))?))
            },
            &[x],
            1e-5,
            24,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    fn geometry() -> BlockGeometry {
        BlockGeometry {
            hidden_size: 8,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            intermediate_size: 12,
            rms_norm_eps: 1e-6,
        }
    }

    fn bind(l: &LayerWeights<Arc<Tensor<f64>>>) -> LayerWeights<Var<f64>> {
        l.try_map::<_, Error>(|_, w| Ok(Var::shared(Arc::clone(w)))).unwrap()
    }

    #[test]
    fn zero_external_kv_leaves_only_mlp_path() {
        let geo = geometry();
        let mut rng = SeededRng::new(10);
        let layer = bind(&geo.init_layer::<f64>(false, 0.3, &mut rng));
        let tape = Tape::no_grad();
        let h = Var::constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let zeros = Var::constant(Tensor::zeros(&[3, 4]));
        let seg = [KvSegment::new(zeros.clone(), zeros, 3, KvLayout::BatchMajor)];
        let pos = [0, 1, 2];
        let rope = rope64(4);
        let src = KvSource::External { segments: &seg, positions: &pos };
        let out = transformer_block(&tape, &layer, &geo, &rope, &h, 1, &pos, src).unwrap();
        assert!(out.kv.is_none());
        assert_eq!(out.h.shape(), h.shape());

        let x = tape.rms_norm(&h, &layer.mlp_norm, geo.rms_norm_eps).unwrap();
        let act = tape.swiglu(&tape.matmul(&x, &layer.w_gate).unwrap(), &tape.matmul(&x, &layer.w_up).unwrap()).unwrap();
        let expect = tape.add(&h, &tape.matmul(&act, &layer.w_down).unwrap()).unwrap();
        assert_eq!(out.h.value(), expect.value());
    }

    #[test]
    fn source_must_match_layer_kind() {
        let geo = geometry();
        let mut rng = SeededRng::new(11);
        let rope = rope64(4);
        let tape = Tape::no_grad();
        let h = Var::constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let condensed = bind(&geo.init_layer::<f64>(false, 0.3, &mut rng));
        let own = KvSource::Own { past: &[], past_positions: &[] };
        assert!(matches!(
            transformer_block(&tape, &condensed, &geo, &rope, &h, 1, &[0], own),
            Err(Error::Config(_))
        ));
        let warm = bind(&geo.init_layer::<f64>(true, 0.3, &mut rng));
        let ext = KvSource::External { segments: &[], positions: &[] };
        assert!(matches!(transformer_block(&tape, &warm, &geo, &rope, &h, 1, &[0], ext), Err(Error::Config(_))));
    }

    #[test]
    fn causality_under_both_masks() {
        let geo = geometry();
        let mut rng = SeededRng::new(12);
        let rope = rope64(4);
        let warm = bind(&geo.init_layer::<f64>(true, 0.3, &mut rng));
        let cond = bind(&geo.init_layer::<f64>(false, 0.3, &mut rng));
        let h = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let pos = [0, 1, 2, 3];
        let run = |h: &Tensor<f64>, kv: &Tensor<f64>, own: bool| {
            let tape = Tape::no_grad();
            let seg = [KvSegment::new(Var::constant(kv.clone()), Var::constant(kv.clone()), 4, KvLayout::BatchMajor)];
            let (layer, src) = if own {
                (&warm, KvSource::Own { past: &[], past_positions: &[] })
            } else {
                (&cond, KvSource::External { segments: &seg, positions: &pos })
            };
            let out = transformer_block(&tape, layer, &geo, &rope, &Var::constant(h.clone()), 1, &pos, src).unwrap();
            out.h.value().clone()
        };
        for own in [true, false] {
            let base = run(&h, &kv, own);
            let mut h2 = h.clone();
            h2.data_mut()[2 * 8 + 3] += 1.0;
            let mut kv2 = kv.clone();
            kv2.data_mut()[2 * 4 + 1] += 1.0;
            let moved = run(&h2, &kv2, own);
            for r in 0..2 {
                assert_eq!(base.row(r), moved.row(r), "row {r} own={own}");
            }
            assert_ne!(base.row(3), moved.row(3));
        }
        // Diagonal independence: position i ignores k_i, v_i.
        let base = run(&h, &kv, false);
        let mut kv2 = kv.clone();
        kv2.data_mut()[3 * 4..4 * 4].iter_mut().for_each(|x| *x += 5.0);
        assert_eq!(base, run(&h, &kv2, false));
    }
}
