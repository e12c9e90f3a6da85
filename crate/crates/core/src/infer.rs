//! Autoregressive inference: the condensed cache layout, iterative prompt
//! encoding, single-pass decoding, sink-plus-window eviction, sampling and
//! teacher-forced per-position loss.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::model::{InitialKv, LayerRole, Model, ParallelOptions, PastKv};
use crate::nn::{KvLayout, KvSegment};
use crate::tensor::{log_sum_exp, Scalar, SeededRng, Tensor};
use crate::tokenizer::BOS;

/// Keys and values of one cached layer. Every sequence owns a block of
/// `capacity` rows, so slot `t` of sequence `b` is row `b * capacity + t`
/// and the slots of one sequence are contiguous.
#[derive(Clone, Debug)]
pub struct LayerCache<T: Scalar> {
    k: Arc<Tensor<T>>,
    v: Arc<Tensor<T>>,
    batch: usize,
    capacity: usize,
    len: usize,
}

impl<T: Scalar> LayerCache<T> {
    fn empty(batch: usize, kv_width: usize) -> Self {
        let k = Arc::new(Tensor::zeros(&[0, kv_width]));
        LayerCache { v: Arc::clone(&k), k, batch, capacity: 0, len: 0 }
    }

    /// Filled slots per sequence.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Allocated slots per sequence.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn key(&self, b: usize, slot: usize) -> &[T] {
        assert!(b < self.batch && slot < self.len, "slot ({b}, {slot}) outside the cache");
        self.k.row(b * self.capacity + slot)
    }

    pub fn value(&self, b: usize, slot: usize) -> &[T] {
        assert!(b < self.batch && slot < self.len, "slot ({b}, {slot}) outside the cache");
        self.v.row(b * self.capacity + slot)
    }

    fn width(&self) -> usize {
        self.k.shape()[1]
    }

    fn segments(&self) -> Vec<KvSegment<T>> {
        if self.len == 0 {
            return Vec::new();
        }
        vec![KvSegment::new(
            Var::shared(Arc::clone(&self.k)),
            Var::shared(Arc::clone(&self.v)),
            self.len,
            KvLayout::Padded { capacity: self.capacity },
        )]
    }

    /// Grows every sequence's block to at least `slots` rows.
    fn reserve(&mut self, slots: usize) {
        if slots <= self.capacity {
            return;
        }
        let (w, batch, cap, len) = (self.width(), self.batch, self.capacity, self.len);
        let relayout = |src: &Tensor<T>| {
            let mut out = Tensor::zeros(&[batch * slots, w]);
            for b in 0..batch {
                let from = &src.data()[b * cap * w..][..len * w];
                out.data_mut()[b * slots * w..][..len * w].copy_from_slice(from);
            }
            Arc::new(out)
        };
        self.k = relayout(&self.k);
        self.v = relayout(&self.v);
        self.capacity = slots;
    }

    /// Appends `tokens` slots per sequence from batch-major rows `b * tokens + t`.
    fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>, tokens: usize) -> Result<()> {
        let w = self.width();
        let want = [self.batch * tokens, w];
        if k.shape() != want || v.shape() != want {
            return dim_err(format!("appending {:?}/{:?} to a cache expecting {want:?}", k.shape(), v.shape()));
        }
        if self.len + tokens > self.capacity {
            self.reserve((self.len + tokens).max(2 * self.capacity));
        }
        let (cap, len) = (self.capacity, self.len);
        for (dst, src) in [(&mut self.k, k), (&mut self.v, v)] {
            let dst = Arc::make_mut(dst).data_mut();
            for b in 0..self.batch {
                dst[(b * cap + len) * w..][..tokens * w].copy_from_slice(&src.data()[b * tokens * w..][..tokens * w]);
            }
        }
        self.len += tokens;
        Ok(())
    }

    /// Keeps the given slots, in increasing order, and drops the rest.
    fn keep(&mut self, slots: &[usize]) {
        let (cap, w) = (self.capacity, self.width());
        for t in [&mut self.k, &mut self.v] {
            let data = Arc::make_mut(t).data_mut();
            for b in 0..self.batch {
                for (j, &s) in slots.iter().enumerate() {
                    data.copy_within((b * cap + s) * w..(b * cap + s + 1) * w, (b * cap + j) * w);
                }
            }
        }
        self.len = slots.len();
    }

    fn check(&self) -> Result<()> {
        let rows = self.batch * self.capacity;
        if self.k.rows() != rows || self.v.rows() != rows || self.len > self.capacity {
            return dim_err(format!(
                "cache of {} slots holds {}/{} rows, expected {rows}",
                self.len,
                self.k.rows(),
                self.v.rows()
            ));
        }
        Ok(())
    }

    fn live_elements(&self) -> usize {
        2 * self.batch * self.len * self.width()
    }
}

/// Everything a decoder keeps between steps for a batch of sequences that
/// advance in lock step.
#[derive(Clone, Debug)]
pub struct KVCacheSet<T: Scalar> {
    batch: usize,
    /// `(layer, cache)` for every warmup layer, bottom to top.
    pub warmup: Vec<(usize, LayerCache<T>)>,
    /// Keys/values projected from the top layer; absent for a standard decoder.
    pub condensed: Option<LayerCache<T>>,
    positions: Vec<usize>,
}

impl<T: Scalar> KVCacheSet<T> {
    pub fn new(model: &Model<T>, batch: usize) -> Self {
        let kw = model.config().kv_width();
        let warmup = model
            .roles()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_warmup())
            .map(|(l, _)| (l, LayerCache::empty(batch, kw)))
            .collect();
        let condensed = (!model.config().is_standard()).then(|| LayerCache::empty(batch, kw));
        KVCacheSet { batch, warmup, condensed, positions: Vec::new() }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Cached slots per sequence.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Absolute token position of every slot, shared by all caches.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }

    /// Number of layers whose keys/values are cached.
    pub fn cache_layers(&self) -> usize {
        self.warmup.len() + usize::from(self.condensed.is_some())
    }

    /// Bytes of keys and values in filled slots.
    pub fn bytes(&self) -> usize {
        self.caches().map(LayerCache::live_elements).sum::<usize>() * std::mem::size_of::<T>()
    }

    /// Makes room for `slots` slots per sequence, so that appending up to
    /// that many does not reallocate.
    pub fn reserve(&mut self, slots: usize) {
        for (_, c) in &mut self.warmup {
            c.reserve(slots);
        }
        if let Some(c) = &mut self.condensed {
            c.reserve(slots);
        }
    }

    fn caches(&self) -> impl Iterator<Item = &LayerCache<T>> {
        self.warmup.iter().map(|(_, c)| c).chain(self.condensed.as_ref())
    }

    /// Checks that every cache holds one filled slot per position.
    pub fn check(&self) -> Result<()> {
        for c in self.caches() {
            c.check()?;
            if c.len() != self.positions.len() {
                return dim_err(format!("cache holds {} slots for {} positions", c.len(), self.positions.len()));
            }
        }
        if self.positions.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Contract("cache positions are not increasing".into()));
        }
        Ok(())
    }

    fn past(&self, roles: &[LayerRole]) -> PastKv<T> {
        let mut past = PastKv::empty(roles);
        for (l, c) in &self.warmup {
            past.layers[*l] = Some((c.segments(), self.positions.clone()));
        }
        if let Some(c) = &self.condensed {
            past.condensed = (c.segments(), self.positions.clone());
        }
        past
    }

    /// Keeps the first `n_sinks` slots and the most recent `window` slots.
    pub fn evict(&mut self, policy: &StreamingPolicy) -> Result<()> {
        let n = self.len();
        if !policy.enabled || n <= policy.capacity() {
            return Ok(());
        }
        let keep: Vec<usize> = (0..policy.n_sinks).chain(n - policy.window..n).collect();
        for (_, c) in &mut self.warmup {
            c.keep(&keep);
        }
        if let Some(c) = &mut self.condensed {
            c.keep(&keep);
        }
        self.positions = keep.iter().map(|&s| self.positions[s]).collect();
        Ok(())
    }
}

fn d_sinks() -> usize {
    4
}
fn d_window() -> usize {
    252
}

/// Attention-sink eviction: keep a few leading slots plus a recent window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamingPolicy {
    #[serde(default = "d_sinks")]
    pub n_sinks: usize,
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default)]
    pub enabled: bool,
}

impl Default for StreamingPolicy {
    fn default() -> Self {
        StreamingPolicy { n_sinks: d_sinks(), window: d_window(), enabled: false }
    }
}

impl StreamingPolicy {
    pub fn new(n_sinks: usize, window: usize) -> Self {
        StreamingPolicy { n_sinks, window, enabled: true }
    }

    pub fn disabled() -> Self {
        StreamingPolicy { enabled: false, ..Default::default() }
    }

    pub fn capacity(&self) -> usize {
        self.n_sinks + self.window
    }

    /// Largest number of slots a cache holds while `tokens` tokens pass
    /// through it; eviction runs right after each append.
    pub fn peak_slots(&self, tokens: usize) -> usize {
        if self.enabled {
            tokens.min(self.capacity() + 1)
        } else {
            tokens
        }
    }

    pub fn check(&self) -> std::result::Result<(), crate::model::InvalidField> {
        if self.capacity() == 0 {
            return Err(crate::model::InvalidField {
                field: "window",
                message: "n_sinks + window must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Greedy,
    Temperature,
    TopK,
}

fn d_temperature() -> f64 {
    1.0
}
fn d_top_k() -> usize {
    40
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default)]
    pub mode: SamplingMode,
    /// Ignored by greedy decoding.
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Only used by top-k sampling.
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { mode: SamplingMode::Greedy, temperature: d_temperature(), top_k: d_top_k(), seed: 0 }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn check(&self) -> std::result::Result<(), crate::model::InvalidField> {
        let bad = |field, message: String| Err(crate::model::InvalidField { field, message });
        if self.mode == SamplingMode::Greedy {
            return Ok(());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", format!("must be positive, got {}", self.temperature));
        }
        if self.mode == SamplingMode::TopK && self.top_k == 0 {
            return bad("top_k", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Draws tokens from logit rows.
#[derive(Clone, Debug)]
pub struct Sampler {
    config: SamplingConfig,
    rng: SeededRng,
}

impl Sampler {
    pub fn new(config: SamplingConfig) -> Result<Self> {
        config.check().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Sampler { config, rng: SeededRng::new(config.seed) })
    }

    pub fn sample<T: Scalar>(&mut self, logits: &[T]) -> u32 {
        let greedy = || crate::tensor::argmax(logits) as u32;
        let mut cand: Vec<(usize, f64)> = match self.config.mode {
            SamplingMode::Greedy => return greedy(),
            SamplingMode::Temperature => logits.iter().map(|x| x.as_f64()).enumerate().collect(),
            SamplingMode::TopK => {
                let mut all: Vec<(usize, f64)> = logits.iter().map(|x| x.as_f64()).enumerate().collect();
                all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                all.truncate(self.config.top_k);
                all
            }
        };
        let t = self.config.temperature;
        let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in &mut cand {
            c.1 = ((c.1 - max) / t).exp();
            total += c.1;
        }
        if !(total > 0.0 && total.is_finite()) {
            return greedy();
        }
        let mut u = self.rng.unit() * total;
        for &(i, p) in &cand {
            if u < p {
                return i as u32;
            }
            u -= p;
        }
        cand.last().map_or_else(greedy, |c| c.0 as u32)
    }
}

/// Runs `n_iters` parallel iterations over equal-length prompts (flattened
/// sequence by sequence) and caches the keys/values of the last one.
pub fn encode_prompt<T: Scalar>(
    model: &Model<T>,
    prompts: &[u32],
    batch: usize,
    n_iters: usize,
    policy: &StreamingPolicy,
) -> Result<KVCacheSet<T>> {
    if batch == 0 || prompts.len() % batch != 0 {
        return dim_err(format!("{} prompt ids do not split into {batch} sequences", prompts.len()));
    }
    let mut cache = KVCacheSet::new(model, batch);
    let n = prompts.len() / batch;
    if n == 0 {
        return Ok(cache);
    }
    let max = model.config().max_seq_len;
    if n > max && !policy.enabled {
        return Err(Error::ContextOverflow { position: n - 1, max_seq_len: max });
    }
    // A prompt longer than the context is encoded in parallel up to the
    // context length and then token by token under eviction.
    let head = n.min(max);
    let ids: Vec<u32> = (0..batch).flat_map(|b| prompts[b * n..b * n + head].iter().copied()).collect();
    let tape = Tape::no_grad();
    let w = model.constants();
    let opts = ParallelOptions { compute_logits: false, initial_kv: InitialKv::Zero, ..ParallelOptions::new(n_iters) };
    let out = model.parallel_forward(&tape, &w, &ids, batch, &opts)?;
    for ((l, c), (l2, k, v)) in cache.warmup.iter_mut().zip(&out.warmup_kv) {
        debug_assert_eq!(l, l2);
        c.append(k.value(), v.value(), head)?;
    }
    if let (Some(c), Some((k, v))) = (cache.condensed.as_mut(), &out.condensed_kv) {
        c.append(k.value(), v.value(), head)?;
    }
    cache.positions = (0..head).collect();
    cache.evict(policy)?;
    for t in head..n {
        let col: Vec<u32> = (0..batch).map(|b| prompts[b * n + t]).collect();
        decode_inner(model, &mut cache, &col, t, policy, false)?;
    }
    Ok(cache)
}

/// Feeds one token per sequence at `position` and returns next-token
/// logits `[batch, vocab]`. The new keys/values are appended to every cache
/// and the cache is evicted when streaming is enabled.
pub fn decode_step<T: Scalar>(
    model: &Model<T>,
    cache: &mut KVCacheSet<T>,
    ids: &[u32],
    position: usize,
    policy: &StreamingPolicy,
) -> Result<Tensor<T>> {
    Ok(decode_inner(model, cache, ids, position, policy, true)?.expect("logits requested"))
}

fn decode_inner<T: Scalar>(
    model: &Model<T>,
    cache: &mut KVCacheSet<T>,
    ids: &[u32],
    position: usize,
    policy: &StreamingPolicy,
    want_logits: bool,
) -> Result<Option<Tensor<T>>> {
    if ids.len() != cache.batch {
        return dim_err(format!("{} ids for a cache of batch {}", ids.len(), cache.batch));
    }
    if cache.positions.last().is_some_and(|&p| p >= position) {
        return Err(Error::Contract(format!("position {position} is not after the cached positions")));
    }
    if position >= model.config().max_seq_len && !policy.enabled {
        return Err(Error::ContextOverflow { position, max_seq_len: model.config().max_seq_len });
    }
    let tape = Tape::no_grad();
    let w = model.constants();
    let step = {
        let past = cache.past(model.roles());
        model.token_step(&tape, &w, ids, position, &past, want_logits)?
    };
    for ((l, c), (l2, k, v)) in cache.warmup.iter_mut().zip(&step.warmup_kv) {
        debug_assert_eq!(l, l2);
        c.append(k.value(), v.value(), 1)?;
    }
    if let (Some(c), Some((k, v))) = (cache.condensed.as_mut(), &step.condensed_kv) {
        c.append(k.value(), v.value(), 1)?;
    }
    cache.positions.push(position);
    cache.evict(policy)?;
    Ok(step.logits.map(|l| l.value().clone()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// New tokens per sequence.
    pub tokens: Vec<Vec<u32>>,
    /// Largest cache footprint seen, in bytes.
    pub peak_cache_bytes: usize,
    pub cache_layers: usize,
    pub final_cache_len: usize,
}

/// Generates `n_new` tokens for each of the equal-length prompts.
///
/// Every prompt token except the last is encoded with `n_iters` parallel
/// iterations; the last one (or BOS for an empty prompt) is the first
/// decode step, so the output takes exactly `n_new` decode steps.
pub fn generate_batch<T: Scalar>(
    model: &Model<T>,
    prompts: &[Vec<u32>],
    n_new: usize,
    n_iters: usize,
    sampling: &SamplingConfig,
    policy: &StreamingPolicy,
) -> Result<Generation> {
    if n_new == 0 {
        return Err(Error::Contract("n_new must be at least 1".into()));
    }
    let batch = prompts.len();
    let n = prompts.first().map_or(0, Vec::len);
    if batch == 0 || prompts.iter().any(|p| p.len() != n) {
        return Err(Error::Contract("prompts must be non-empty in number and equal in length".into()));
    }
    let head: Vec<u32> = prompts.iter().flat_map(|p| p[..n.saturating_sub(1)].iter().copied()).collect();
    let mut cache = encode_prompt(model, &head, batch, n_iters, policy)?;
    cache.reserve(policy.peak_slots(n.saturating_sub(1) + n_new));
    if n == 0 && (BOS as usize) >= model.config().vocab_size {
        return Err(Error::Contract("an empty prompt needs a vocabulary that contains BOS".into()));
    }
    let mut current: Vec<u32> = prompts.iter().map(|p| p.last().copied().unwrap_or(BOS)).collect();
    let mut position = n.saturating_sub(1);
    let mut samplers: Vec<Sampler> = (0..batch)
        .map(|b| Sampler::new(SamplingConfig { seed: sampling.seed.wrapping_add(b as u64), ..*sampling }))
        .collect::<Result<_>>()?;
    let mut tokens = vec![Vec::with_capacity(n_new); batch];
    let mut peak = cache.bytes();
    for _ in 0..n_new {
        let logits = decode_step(model, &mut cache, &current, position, policy)?;
        peak = peak.max(cache.bytes());
        for b in 0..batch {
            let t = samplers[b].sample(logits.row(b));
            tokens[b].push(t);
            current[b] = t;
        }
        position += 1;
    }
    Ok(Generation { tokens, peak_cache_bytes: peak, cache_layers: cache.cache_layers(), final_cache_len: cache.len() })
}

/// Single-sequence [`generate_batch`] using the model's training iteration count.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    prompt: &[u32],
    n_new: usize,
    sampling: &SamplingConfig,
    policy: &StreamingPolicy,
) -> Result<Vec<u32>> {
    let iters = model.config().train_m + model.config().train_b;
    let out = generate_batch(model, &[prompt.to_vec()], n_new, iters, sampling, policy)?;
    Ok(out.tokens.into_iter().next().expect("one sequence"))
}

/// Teacher-forced losses from token-by-token decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct NllTrace {
    /// `nll[i]` scores token `i + 1` given tokens `0..=i`.
    pub nll: Vec<f64>,
    /// Cache slots held after each decode step.
    pub occupancy: Vec<usize>,
}

impl NllTrace {
    pub fn mean(&self) -> f64 {
        self.nll.iter().sum::<f64>() / self.nll.len() as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean().exp()
    }

    /// CSV with header `position,nll`; `position` is the scored token's index.
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "position,nll")?;
        for (i, x) in self.nll.iter().enumerate() {
            writeln!(out, "{},{:.6}", i + 1, x)?;
        }
        Ok(())
    }
}

pub fn per_position_nll<T: Scalar>(model: &Model<T>, ids: &[u32], policy: &StreamingPolicy) -> Result<NllTrace> {
    if ids.len() < 2 {
        return Err(Error::Contract("per-position loss needs at least 2 tokens".into()));
    }
    let mut cache = KVCacheSet::new(model, 1);
    cache.reserve(policy.peak_slots(ids.len() - 1));
    let mut nll = Vec::with_capacity(ids.len() - 1);
    let mut occupancy = Vec::with_capacity(ids.len() - 1);
    for (pos, pair) in ids.windows(2).enumerate() {
        let logits = decode_step(model, &mut cache, &pair[..1], pos, policy)?;
        let row = logits.row(0);
        let target = pair[1] as usize;
        if target >= row.len() {
            return Err(Error::Contract(format!("token {target} outside the vocabulary")));
        }
        nll.push((log_sum_exp(row) - row[target]).as_f64());
        occupancy.push(cache.len());
    }
    Ok(NllTrace { nll, occupancy })
}
