//! Training: iterative parallel forward with gradient stopping, AdamW with
//! a cosine schedule, evaluation, and initialization from a standard
//! decoder's weights.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{CondensedKv, Model, ModelConfig, ModelGrads, ModelWeights, ParallelOptions};
use crate::tensor::{Scalar, SeededRng, Tensor};

fn d_lr_max() -> f64 {
    3e-3
}
fn d_lr_min() -> f64 {
    3e-4
}
fn d_warmup() -> usize {
    50
}
fn d_total() -> usize {
    1000
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.1
}
fn d_clip() -> f64 {
    1.0
}
fn d_batch_tokens() -> usize {
    4096
}
fn d_seq_len() -> usize {
    256
}

/// Optimizer and data settings. The iteration counts live in
/// [`ModelConfig::train_m`] and [`ModelConfig::train_b`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr_max")]
    pub lr_max: f64,
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_total")]
    pub total_steps: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Tokens per optimizer step; the batch holds `batch_size_tokens / seq_len` sequences.
    #[serde(default = "d_batch_tokens")]
    pub batch_size_tokens: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    /// Weight of the optional KV consistency term; 0 disables it.
    #[serde(default)]
    pub kv_loss_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: d_lr_max(),
            lr_min: d_lr_min(),
            warmup_steps: d_warmup(),
            total_steps: d_total(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            grad_clip: d_clip(),
            batch_size_tokens: d_batch_tokens(),
            seq_len: d_seq_len(),
            kv_loss_weight: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        (self.batch_size_tokens / self.seq_len.max(1)).max(1)
    }

    /// Steps needed to consume `tokens` training tokens.
    pub fn steps_for_budget(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.batch_size() * self.seq_len)
    }

    pub fn check(&self) -> std::result::Result<(), crate::model::InvalidField> {
        let bad = |field, message: String| Err(crate::model::InvalidField { field, message });
        if !(self.lr_max > 0.0) {
            return bad("lr_max", "must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("lr_min", format!("must lie in [0, lr_max], got {}", self.lr_min));
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps", "exceeds total_steps".into());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len", "must be positive".into());
        }
        if self.batch_size_tokens < self.seq_len {
            return bad("batch_size_tokens", format!("must hold at least one sequence of {}", self.seq_len));
        }
        if !(self.kv_loss_weight >= 0.0) {
            return bad("kv_loss_weight", "must be non-negative".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, tc: &TrainConfig) -> f64 {
    if step < tc.warmup_steps {
        return tc.lr_max * step as f64 / tc.warmup_steps as f64;
    }
    if step >= tc.total_steps {
        return tc.lr_min;
    }
    let span = (tc.total_steps - tc.warmup_steps) as f64;
    let progress = (step - tc.warmup_steps) as f64 / span;
    tc.lr_min + 0.5 * (tc.lr_max - tc.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `batch` sequences of `seq_len` inputs with next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Builds a batch from windows of `seq_len + 1` tokens.
    pub fn from_windows(windows: &[&[u32]]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        if first.len() < 2 || windows.iter().any(|w| w.len() != first.len()) {
            return Err(Error::Contract("batch windows must share a length of at least 2".into()));
        }
        let seq_len = first.len() - 1;
        let mut ids = Vec::with_capacity(windows.len() * seq_len);
        let mut targets = Vec::with_capacity(windows.len() * seq_len);
        for w in windows {
            ids.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Batch { ids, targets, batch: windows.len(), seq_len })
    }

    /// `batch` windows at uniformly random offsets.
    pub fn sample(tokens: &[u32], batch: usize, seq_len: usize, rng: &mut SeededRng) -> Result<Self> {
        if tokens.len() < seq_len + 1 {
            return Err(Error::Contract(format!("{} tokens cannot fill a window of {}", tokens.len(), seq_len + 1)));
        }
        let span = tokens.len() - seq_len;
        let windows: Vec<&[u32]> = (0..batch)
            .map(|_| {
                let start = rng.below(span);
                &tokens[start..start + seq_len + 1]
            })
            .collect();
        Self::from_windows(&windows)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().chain(&self.targets).find(|&&t| t as usize >= vocab) {
            Some(t) => Err(Error::Contract(format!("token id {t} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }
}

/// AdamW moments for every parameter, in [`crate::model::ModelParams::named`] order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub step: usize,
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let named = weights.named();
        OptimizerState {
            step: 0,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            m: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Norm gains and the embedding table are not decayed.
pub fn is_decayed(name: &str) -> bool {
    !(name == "embed" || name.ends_with("norm"))
}

/// One decoupled-weight-decay Adam update with learning rate `lr`.
pub fn adamw_update<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &ModelGrads<T>,
    state: &mut OptimizerState<T>,
    tc: &TrainConfig,
    lr: f64,
    grad_scale: f64,
) -> Result<()> {
    let grads: Vec<&Tensor<T>> = grads.named().into_iter().map(|(_, g)| g).collect();
    if grads.len() != state.m.len() {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(tc.beta1), T::lit(tc.beta2));
    let bc1 = T::lit(1.0 - tc.beta1.powi(t));
    let bc2 = T::lit(1.0 - tc.beta2.powi(t));
    let (lr_t, eps, scale) = (T::lit(lr), T::lit(tc.eps), T::lit(grad_scale));
    let one = T::one();
    let mut i = 0;
    let mut result = Ok(());
    weights.for_each_mut(|name, p| {
        let decay = if is_decayed(name) { T::lit(tc.weight_decay) } else { T::zero() };
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], grads[i]);
        i += 1;
        if g.shape() != p.shape() {
            result = Err(Error::Contract(format!("gradient for {name} has shape {:?}", g.shape())));
            return;
        }
        let p = Arc::make_mut(p);
        for (((w, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g * scale;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *w = *w - lr_t * (update + decay * *w);
        }
    });
    result
}

/// Mean squared difference between the condensed keys/values entering and
/// leaving the last iteration.
pub fn kv_consistency_loss<T: Scalar>(tape: &Tape<T>, prev: &(Var<T>, Var<T>), last: &(Var<T>, Var<T>)) -> Result<Var<T>> {
    let k = tape.mse(&prev.0, &last.0)?;
    let v = tape.mse(&prev.1, &last.1)?;
    Ok(tape.scale(&tape.add(&k, &v)?, T::lit(0.5)))
}

/// Iteration options used for training and matching evaluation.
pub fn training_options<T: Scalar>(config: &ModelConfig) -> ParallelOptions<T> {
    let mut o = ParallelOptions::new(config.train_m + config.train_b);
    o.detached_iters = config.train_m;
    o
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce_loss: f64,
    pub kv_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss and gradients for one batch, without updating anything.
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, batch: &Batch, tc: &TrainConfig) -> Result<(f64, f64, f64, ModelGrads<T>)> {
    batch.check_vocab(model.config().vocab_size)?;
    let tape = Tape::new();
    let w = model.bind(&tape);
    let opts = training_options(model.config());
    let out = model.parallel_forward(&tape, &w, &batch.ids, batch.batch, &opts)?;
    let logits = out.logits.as_ref().expect("logits requested");
    let ce = tape.cross_entropy(logits, &batch.targets)?;
    let ce_value = ce.value().item()?.as_f64();
    let mut kv_value = 0.0;
    let loss = match (&out.condensed_input, &out.condensed_kv) {
        (Some(prev), Some(last)) if tc.kv_loss_weight > 0.0 => {
            let kv = kv_consistency_loss(&tape, prev, last)?;
            kv_value = kv.value().item()?.as_f64();
            tape.add(&ce, &tape.scale(&kv, T::lit(tc.kv_loss_weight)))?
        }
        _ => ce,
    };
    let total = loss.value().item()?.as_f64();
    let grads = tape.backward(&loss)?;
    Ok((total, ce_value, kv_value, w.gradients(&grads)))
}

pub fn grad_norms<T: Scalar>(grads: &ModelGrads<T>) -> (f64, Vec<(String, f64)>) {
    let per: Vec<(String, f64)> = grads.named().into_iter().map(|(n, g)| (n, g.sum_sq().as_f64().sqrt())).collect();
    let total = per.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    (total, per)
}

/// Forward, backward, clip and AdamW for one batch.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    batch: &Batch,
    tc: &TrainConfig,
) -> Result<StepStats> {
    let step = state.step + 1;
    let lr = cosine_lr(step, tc);
    let (loss, ce_loss, kv_loss, grads) = loss_and_grads(model, batch, tc)?;
    let (grad_norm, per) = grad_norms(&grads);
    if !loss.is_finite() || !grad_norm.is_finite() {
        let mut top = per;
        top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        top.truncate(5);
        return Err(Error::NonFiniteLoss { step, loss, lr, grad_norm, top_grad_norms: top });
    }
    let scale = if grad_norm > tc.grad_clip { tc.grad_clip / grad_norm } else { 1.0 };
    adamw_update(&mut model.weights, &grads, state, tc, lr, scale)?;
    Ok(StepStats { step, lr, loss, ce_loss, kv_loss, grad_norm })
}

/// How many parallel iterations evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalIters {
    /// The training setting, `train_m + train_b`.
    Training,
    /// Exactly `k` iterations.
    Iterations(usize),
    /// As many iterations as tokens, which reproduces the token-by-token graph.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub tokens: usize,
}

impl EvalReport {
    pub fn perplexity(&self) -> f64 {
        self.loss.exp()
    }
}

/// Mean next-token loss over consecutive windows of `seq_len + 1` tokens.
/// Every target token in the text is scored once, except that each window
/// starts fresh.
pub fn evaluate<T: Scalar>(model: &Model<T>, tokens: &[u32], seq_len: usize, iters: EvalIters, batch: usize) -> Result<EvalReport> {
    let windows = eval_windows(tokens, seq_len);
    if windows.is_empty() {
        return Err(Error::Contract(format!("{} tokens are too few to evaluate", tokens.len())));
    }
    let tape = Tape::no_grad();
    let w = model.constants();
    let mut total = 0.0;
    let mut count = 0;
    // Windows of equal length are batched together.
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len();
        let mut j = i;
        while j < windows.len() && j - i < batch.max(1) && windows[j].len() == len {
            j += 1;
        }
        let b = Batch::from_windows(&windows[i..j])?;
        let opts = match iters {
            EvalIters::Training => training_options(model.config()),
            EvalIters::Iterations(k) => ParallelOptions::new(k),
            EvalIters::Exact => ParallelOptions::new(b.seq_len),
        };
        let out = model.parallel_forward(&tape, &w, &b.ids, b.batch, &opts)?;
        let ce = tape.cross_entropy(out.logits.as_ref().expect("logits requested"), &b.targets)?;
        let n = b.targets.len();
        total += ce.value().item()?.as_f64() * n as f64;
        count += n;
        i = j;
    }
    Ok(EvalReport { loss: total / count as f64, tokens: count })
}

/// Consecutive windows of at most `seq_len + 1` tokens overlapping by one.
pub fn eval_windows(tokens: &[u32], seq_len: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start = end - 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub tokens_seen: usize,
    pub history: Vec<StepStats>,
    pub seconds: f64,
}

/// Runs `tc.total_steps` steps on random windows of `tokens`, writing one
/// CSV row per step to `log` when given.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    tokens: &[u32],
    tc: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    tc.validate()?;
    if tc.seq_len > model.config().max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds max_seq_len {}",
            tc.seq_len,
            model.config().max_seq_len
        )));
    }
    let mut rng = SeededRng::new(tc.seed);
    let mut state = OptimizerState::new(&model.weights);
    let batch_size = tc.batch_size();
    if let Some(out) = log.as_deref_mut() {
        writeln!(out, "step,lr,loss,grad_norm,tokens_per_sec")?;
    }
    let started = Instant::now();
    let mut history = Vec::with_capacity(tc.total_steps);
    let mut tokens_seen = 0;
    for _ in 0..tc.total_steps {
        let batch = Batch::sample(tokens, batch_size, tc.seq_len, &mut rng)?;
        let t0 = Instant::now();
        let stats = train_step(model, &mut state, &batch, tc)?;
        let rate = batch.ids.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9);
        tokens_seen += batch.ids.len();
        if let Some(out) = log.as_deref_mut() {
            writeln!(out, "{},{:.6e},{:.6},{:.6},{:.1}", stats.step, stats.lr, stats.loss, stats.grad_norm, rate)?;
        }
        history.push(stats);
    }
    Ok(TrainReport { steps: history.len(), tokens_seen, history, seconds: started.elapsed().as_secs_f64() })
}

/// What [`init_from_standard`] kept and dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitReport {
    /// Reduction in key/value projection pairs: `L - (w + 1)`.
    pub discarded_pairs: usize,
    /// Layers whose own projections were dropped.
    pub dropped_layers: Vec<usize>,
}

/// Builds condensed-model weights from a standard decoder with the same
/// geometry. Condensed layers drop their key/value projections; the
/// condensed pair starts from the standard top layer's projections and
/// attention norm.
pub fn init_from_standard<T: Scalar>(
    standard: &ModelWeights<T>,
    standard_config: &ModelConfig,
    config: &ModelConfig,
) -> Result<(ModelWeights<T>, InitReport)> {
    let mut diffs = Vec::new();
    macro_rules! same {
        ($($f:ident),*) => {$(
            if standard_config.$f != config.$f {
                diffs.push(format!("{}: {} vs {}", stringify!($f), standard_config.$f, config.$f));
            }
        )*};
    }
    same!(n_layers, hidden_size, n_heads, n_kv_heads, intermediate_size, vocab_size);
    if !diffs.is_empty() {
        return Err(Error::Config(format!("checkpoint geometry differs: {}", diffs.join(", "))));
    }
    if standard.layers.iter().any(|l| !l.has_kv()) || standard.condensed.is_some() {
        return Err(Error::Config("source weights are not a standard decoder".into()));
    }
    Model::from_weights(standard_config.clone(), standard.clone())?;
    let roles = crate::model::layer_roles(config)?;
    let mut out = standard.clone();
    let mut dropped = Vec::new();
    for (i, (layer, role)) in out.layers.iter_mut().zip(&roles).enumerate() {
        if !role.is_warmup() {
            layer.wk = None;
            layer.wv = None;
            dropped.push(i);
        }
    }
    if !config.is_standard() {
        let top = standard.layers.last().expect("at least one layer");
        out.condensed = Some(CondensedKv {
            norm: Arc::clone(&top.attn_norm),
            wk: Arc::clone(top.wk.as_ref().expect("checked above")),
            wv: Arc::clone(top.wv.as_ref().expect("checked above")),
        });
    }
    let report = InitReport { discarded_pairs: standard.kv_pair_count() - out.kv_pair_count(), dropped_layers: dropped };
    Model::from_weights(config.clone(), out.clone())?;
    Ok((out, report))
}
