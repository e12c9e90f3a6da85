//! The condensed-KV decoder: configuration, layer roles, parameters and the
//! two computation graphs (token-by-token and iterative parallel).
//!
//! Condensed layers own no key/value projections. They attend, without
//! their own position, to keys/values computed from the topmost block's
//! output by a dedicated projection pair. Warmup layers are ordinary
//! self-attention layers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{
    apply_rope, batch_major_positions, transformer_block, BlockGeometry, KvLayout, KvSegment, KvSource,
    LayerWeights, RotaryTable,
};
use crate::tensor::{DType, Scalar, SeededRng, Tensor};

/// Where the warmup layers sit in the stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Half at the bottom, half at the top.
    #[default]
    Sandwich,
    AllBottom,
    AllTop,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sandwich" => Ok(Placement::Sandwich),
            "all-bottom" => Ok(Placement::AllBottom),
            "all-top" => Ok(Placement::AllTop),
            other => Err(Error::Config(format!("unknown placement {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerRole {
    WarmupBottom,
    Condensed,
    WarmupTop,
}

impl LayerRole {
    pub fn is_warmup(self) -> bool {
        self != LayerRole::Condensed
    }
}

fn default_vocab() -> usize {
    crate::tokenizer::VOCAB_SIZE
}
fn default_max_seq_len() -> usize {
    256
}
fn default_m() -> usize {
    7
}
fn default_b() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-5
}
fn default_rope_base() -> f64 {
    10000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub warmup_count: usize,
    #[serde(default)]
    pub placement: Placement,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Iterations run without gradient during training and prompt encoding.
    #[serde(default = "default_m")]
    pub train_m: usize,
    /// Iterations that carry gradient.
    #[serde(default = "default_b")]
    pub train_b: usize,
    #[serde(default = "default_eps")]
    pub rms_norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub dtype: DType,
}

/// A field-level validation failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvalidField {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for InvalidField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ModelConfig {
    /// The default desk preset: 8 layers, width 128, 8 query and 4 kv heads.
    pub fn desk(warmup_count: usize) -> Self {
        ModelConfig {
            n_layers: 8,
            warmup_count,
            placement: Placement::Sandwich,
            hidden_size: 128,
            n_heads: 8,
            n_kv_heads: 4,
            intermediate_size: 256,
            vocab_size: default_vocab(),
            max_seq_len: 256,
            train_m: default_m(),
            train_b: default_b(),
            rms_norm_eps: default_eps(),
            rope_base: default_rope_base(),
            dtype: DType::Float32,
        }
    }

    /// A very small geometry for tests.
    pub fn tiny(n_layers: usize, warmup_count: usize) -> Self {
        ModelConfig {
            n_layers,
            warmup_count,
            hidden_size: 16,
            n_heads: 4,
            n_kv_heads: 2,
            intermediate_size: 24,
            vocab_size: 32,
            max_seq_len: 64,
            ..Self::desk(warmup_count)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads.max(1)
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn geometry(&self) -> BlockGeometry {
        BlockGeometry {
            hidden_size: self.hidden_size,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim(),
            intermediate_size: self.intermediate_size,
            rms_norm_eps: self.rms_norm_eps,
        }
    }

    /// True when every layer is a warmup layer, i.e. a standard decoder.
    pub fn is_standard(&self) -> bool {
        self.warmup_count == self.n_layers
    }

    /// Number of layers whose keys/values are cached at inference.
    pub fn cache_layers(&self) -> usize {
        if self.is_standard() {
            self.n_layers
        } else {
            self.warmup_count + 1
        }
    }

    pub fn check(&self) -> std::result::Result<(), InvalidField> {
        let bad = |field, message: String| Err(InvalidField { field, message });
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1".into());
        }
        if self.warmup_count > self.n_layers {
            return bad("warmup_count", format!("{} exceeds n_layers {}", self.warmup_count, self.n_layers));
        }
        if self.warmup_count % 2 != 0 && self.warmup_count != self.n_layers {
            return bad("warmup_count", format!("must be even, got {}", self.warmup_count));
        }
        if self.n_heads == 0 || self.hidden_size % self.n_heads != 0 {
            return bad("n_heads", format!("hidden_size {} is not divisible by {}", self.hidden_size, self.n_heads));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return bad("n_kv_heads", format!("n_heads {} is not divisible by {}", self.n_heads, self.n_kv_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad("n_heads", format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.intermediate_size == 0 {
            return bad("intermediate_size", "must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len", "must be positive".into());
        }
        if self.train_b == 0 {
            return bad("train_b", "must be at least 1".into());
        }
        if !(self.rms_norm_eps > 0.0) {
            return bad("rms_norm_eps", "must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base", "must exceed 1".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| Error::Config(e.to_string()))
    }

    /// Total trainable parameters for this configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_size;
        let qw = self.n_heads * self.head_dim();
        let kv = 2 * d * self.kv_width();
        let layer = d * qw + qw * d + 3 * d * self.intermediate_size + 2 * d;
        let mut n = 2 * self.vocab_size * d + d + self.n_layers * layer + self.warmup_count * kv;
        if !self.is_standard() {
            n += kv + d;
        }
        n
    }
}

/// Role of every layer, bottom to top.
pub fn layer_roles(config: &ModelConfig) -> Result<Vec<LayerRole>> {
    let (l, w) = (config.n_layers, config.warmup_count);
    if w > l {
        return Err(Error::Config(format!("warmup_count {w} exceeds n_layers {l}")));
    }
    if w % 2 != 0 && w != l {
        return Err(Error::Config(format!("warmup_count must be even, got {w}")));
    }
    let (bottom, top) = match config.placement {
        _ if w == l => (l, 0),
        Placement::Sandwich => (w / 2, w / 2),
        Placement::AllBottom => (w, 0),
        Placement::AllTop => (0, w),
    };
    Ok((0..l)
        .map(|i| {
            if i < bottom {
                LayerRole::WarmupBottom
            } else if i >= l - top {
                LayerRole::WarmupTop
            } else {
                LayerRole::Condensed
            }
        })
        .collect())
}

/// Projection pair producing the condensed keys/values from the top
/// block's output, preceded by its own RMSNorm gain.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedKv<W> {
    pub norm: W,
    pub wk: W,
    pub wv: W,
}

/// All parameters of a model, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<W> {
    pub embed: W,
    pub layers: Vec<LayerWeights<W>>,
    /// Absent when every layer is a warmup layer.
    pub condensed: Option<CondensedKv<W>>,
    pub final_norm: W,
    pub lm_head: W,
}

pub type ModelWeights<T> = ModelParams<Arc<Tensor<T>>>;
pub type BoundWeights<T> = ModelParams<Var<T>>;
pub type ModelGrads<T> = ModelParams<Tensor<T>>;

impl<W> ModelParams<W> {
    /// `(name, value)` pairs in a stable order.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, w)| (format!("layers.{i}.{n}"), w)));
        }
        if let Some(c) = &self.condensed {
            out.push(("condensed.norm".into(), &c.norm));
            out.push(("condensed.wk".into(), &c.wk));
            out.push(("condensed.wv".into(), &c.wv));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &W) -> std::result::Result<U, E>) -> std::result::Result<ModelParams<U>, E> {
        let embed = f("embed", &self.embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.try_map(|n, w| f(&format!("layers.{i}.{n}"), w))?);
        }
        let condensed = match &self.condensed {
            Some(c) => Some(CondensedKv {
                norm: f("condensed.norm", &c.norm)?,
                wk: f("condensed.wk", &c.wk)?,
                wv: f("condensed.wv", &c.wv)?,
            }),
            None => None,
        };
        Ok(ModelParams {
            embed,
            layers,
            condensed,
            final_norm: f("final_norm", &self.final_norm)?,
            lm_head: f("lm_head", &self.lm_head)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &W) -> U) -> ModelParams<U> {
        match self.try_map::<U, std::convert::Infallible>(|n, w| Ok(f(n, w))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    /// Mutable visit in the same order as [`ModelParams::named`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut W)) {
        f("embed", &mut self.embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut g = |n: &str, w: &mut W| f(&format!("layers.{i}.{n}"), w);
            g("wq", &mut layer.wq);
            if let Some(w) = &mut layer.wk {
                g("wk", w);
            }
            if let Some(w) = &mut layer.wv {
                g("wv", w);
            }
            g("wo", &mut layer.wo);
            g("w_gate", &mut layer.w_gate);
            g("w_up", &mut layer.w_up);
            g("w_down", &mut layer.w_down);
            g("attn_norm", &mut layer.attn_norm);
            g("mlp_norm", &mut layer.mlp_norm);
        }
        if let Some(c) = &mut self.condensed {
            f("condensed.norm", &mut c.norm);
            f("condensed.wk", &mut c.wk);
            f("condensed.wv", &mut c.wv);
        }
        f("final_norm", &mut self.final_norm);
        f("lm_head", &mut self.lm_head);
    }

    /// Number of key/value projection pairs, condensed pair included.
    pub fn kv_pair_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_kv()).count() + usize::from(self.condensed.is_some())
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        self.map(|_, t| Arc::new(t.cast()))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

impl<T: Scalar> BoundWeights<T> {
    /// Same values, no gradient.
    pub fn detached(&self) -> Self {
        self.map(|_, v| v.detach())
    }

    pub fn gradients(&self, grads: &Gradients<T>) -> ModelGrads<T> {
        self.map(|_, v| grads.wrt(v))
    }
}

/// Random initialization settings.
#[derive(Clone, Copy, Debug)]
pub struct InitOptions {
    pub std: f64,
    /// Start the output head at zero, which makes the initial prediction uniform.
    pub zero_head: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { std: 0.02, zero_head: false }
    }
}

/// How the condensed keys/values of the first iteration are initialized.
#[derive(Clone, Debug)]
pub enum InitialKv<T: Scalar> {
    Zero,
    Given { k: Tensor<T>, v: Tensor<T> },
}

#[derive(Clone, Debug)]
pub struct ParallelOptions<T: Scalar> {
    pub n_iters: usize,
    pub initial_kv: InitialKv<T>,
    /// The first `detached_iters` iterations run with no gradient at all.
    pub detached_iters: usize,
    pub compute_logits: bool,
    /// Record the top hidden state and condensed KV of every iteration.
    pub keep_trace: bool,
}

impl<T: Scalar> ParallelOptions<T> {
    pub fn new(n_iters: usize) -> Self {
        ParallelOptions { n_iters, initial_kv: InitialKv::Zero, detached_iters: 0, compute_logits: true, keep_trace: false }
    }
}

/// Snapshot of one parallel iteration.
#[derive(Clone, Debug)]
pub struct IterationState<T: Scalar> {
    pub iteration: usize,
    /// Top block output, batch-major `[batch * tokens, hidden]`.
    pub hidden: Tensor<T>,
    /// Condensed keys/values produced at the end of this iteration.
    pub kv: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub batch: usize,
    pub tokens: usize,
    /// Top block output before the final norm, batch-major.
    pub hidden: Var<T>,
    pub logits: Option<Var<T>>,
    /// Condensed keys (rotated) and values produced by the last pass.
    pub condensed_kv: Option<(Var<T>, Var<T>)>,
    /// Condensed keys/values that the last pass consumed.
    pub condensed_input: Option<(Var<T>, Var<T>)>,
    /// `(layer, k, v)` for every warmup layer, from the last pass.
    pub warmup_kv: Vec<(usize, Var<T>, Var<T>)>,
    pub trace: Vec<IterationState<T>>,
}

/// Past keys/values visible to one decoding step.
#[derive(Clone, Debug)]
pub struct PastKv<T: Scalar> {
    /// Indexed by layer; `Some` exactly for warmup layers.
    pub layers: Vec<Option<(Vec<KvSegment<T>>, Vec<usize>)>>,
    pub condensed: (Vec<KvSegment<T>>, Vec<usize>),
}

impl<T: Scalar> PastKv<T> {
    pub fn empty(roles: &[LayerRole]) -> Self {
        PastKv {
            layers: roles.iter().map(|r| r.is_warmup().then(|| (Vec::new(), Vec::new()))).collect(),
            condensed: (Vec::new(), Vec::new()),
        }
    }
}

/// Result of processing one token position for a batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Scalar> {
    /// Top block output, `[batch, hidden]`.
    pub hidden: Var<T>,
    pub logits: Option<Var<T>>,
    /// New keys/values for every warmup layer, `[batch, kv_width]` each.
    pub warmup_kv: Vec<(usize, Var<T>, Var<T>)>,
    pub condensed_kv: Option<(Var<T>, Var<T>)>,
}

/// Configuration, weights and the rotary table.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    roles: Vec<LayerRole>,
    pub weights: ModelWeights<T>,
    rope: Arc<RotaryTable<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn random(config: ModelConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        config.validate()?;
        let roles = layer_roles(&config)?;
        let geo = config.geometry();
        let mut rng = SeededRng::new(seed);
        let d = config.hidden_size;
        let embed = Arc::new(Tensor::randn(&[config.vocab_size, d], opts.std, &mut rng));
        let layers = roles.iter().map(|r| geo.init_layer(r.is_warmup(), opts.std, &mut rng)).collect();
        let condensed = (!config.is_standard()).then(|| CondensedKv {
            norm: Arc::new(Tensor::ones(&[d])),
            wk: Arc::new(Tensor::randn(&[d, config.kv_width()], opts.std, &mut rng)),
            wv: Arc::new(Tensor::randn(&[d, config.kv_width()], opts.std, &mut rng)),
        });
        let lm_head = if opts.zero_head {
            Tensor::zeros(&[d, config.vocab_size])
        } else {
            Tensor::randn(&[d, config.vocab_size], opts.std, &mut rng)
        };
        let weights =
            ModelParams { embed, layers, condensed, final_norm: Arc::new(Tensor::ones(&[d])), lm_head: Arc::new(lm_head) };
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        let roles = layer_roles(&config)?;
        check_weights(&config, &roles, &weights)?;
        let rope = Arc::new(RotaryTable::new(config.head_dim(), config.max_seq_len, config.rope_base)?);
        Ok(Model { config, roles, weights, rope })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn roles(&self) -> &[LayerRole] {
        &self.roles
    }

    pub fn rope(&self) -> &Arc<RotaryTable<T>> {
        &self.rope
    }

    pub fn into_weights(self) -> ModelWeights<T> {
        self.weights
    }

    /// Weights as trainable leaves of `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> BoundWeights<T> {
        self.weights.map(|_, w| tape.param(Arc::clone(w)))
    }

    /// Weights as constants.
    pub fn constants(&self) -> BoundWeights<T> {
        self.weights.map(|_, w| Var::shared(Arc::clone(w)))
    }

    fn first_condensed(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == LayerRole::Condensed)
    }

    fn check_tokens(&self, ids: &[u32], batch: usize) -> Result<usize> {
        if batch == 0 || ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if ids.len() % batch != 0 {
            return dim_err(format!("{} ids do not split into {batch} sequences", ids.len()));
        }
        let n = ids.len() / batch;
        if n > self.config.max_seq_len {
            return Err(Error::ContextOverflow { position: n - 1, max_seq_len: self.config.max_seq_len });
        }
        Ok(n)
    }

    pub fn logits(&self, tape: &Tape<T>, w: &BoundWeights<T>, hidden: &Var<T>) -> Result<Var<T>> {
        let x = tape.rms_norm(hidden, &w.final_norm, self.config.rms_norm_eps)?;
        tape.matmul(&x, &w.lm_head)
    }

    /// Rotated condensed keys and values from top block outputs.
    pub fn condensed_projection(
        &self,
        tape: &Tape<T>,
        w: &BoundWeights<T>,
        hidden: &Var<T>,
        row_positions: &[usize],
    ) -> Result<Option<(Var<T>, Var<T>)>> {
        let Some(c) = &w.condensed else { return Ok(None) };
        let x = tape.rms_norm(hidden, &c.norm, self.config.rms_norm_eps)?;
        let k = apply_rope(tape, &self.rope, &tape.matmul(&x, &c.wk)?, row_positions)?;
        let v = tape.matmul(&x, &c.wv)?;
        Ok(Some((k, v)))
    }

    /// Plain decoder forward: every layer attends causally over its own
    /// keys/values. Only valid when every layer has key/value projections.
    pub fn standard_forward(&self, tape: &Tape<T>, w: &BoundWeights<T>, ids: &[u32], batch: usize) -> Result<ForwardOutput<T>> {
        let n = self.check_tokens(ids, batch)?;
        if w.layers.iter().any(|l| !l.has_kv()) {
            return Err(Error::Config("standard forward needs key/value projections on every layer".into()));
        }
        let geo = self.config.geometry();
        let positions: Vec<usize> = (0..n).collect();
        let mut h = tape.embedding(&w.embed, ids)?;
        let mut warmup_kv = Vec::new();
        for (l, layer) in w.layers.iter().enumerate() {
            let src = KvSource::Own { past: &[], past_positions: &[] };
            let out = transformer_block(tape, layer, &geo, &self.rope, &h, batch, &positions, src)?;
            let (k, v) = out.kv.expect("own source returns kv");
            warmup_kv.push((l, k, v));
            h = out.h;
        }
        let logits = Some(self.logits(tape, w, &h)?);
        Ok(ForwardOutput {
            batch,
            tokens: n,
            hidden: h,
            logits,
            condensed_kv: None,
            condensed_input: None,
            warmup_kv,
            trace: Vec::new(),
        })
    }

    /// Runs the layers in `range` over all tokens. Warmup layers use their
    /// own keys/values; condensed layers read `condensed`.
    #[allow(clippy::too_many_arguments)]
    fn run_layers(
        &self,
        tape: &Tape<T>,
        w: &BoundWeights<T>,
        range: std::ops::Range<usize>,
        mut h: Var<T>,
        batch: usize,
        positions: &[usize],
        condensed: Option<&KvSegment<T>>,
        warmup_kv: &mut Vec<(usize, Var<T>, Var<T>)>,
    ) -> Result<Var<T>> {
        let geo = self.config.geometry();
        for l in range {
            let layer = &w.layers[l];
            let segs: Vec<KvSegment<T>> = condensed.into_iter().cloned().collect();
            let src = if self.roles[l].is_warmup() {
                KvSource::Own { past: &[], past_positions: &[] }
            } else {
                KvSource::External { segments: &segs, positions }
            };
            let out = transformer_block(tape, layer, &geo, &self.rope, &h, batch, positions, src)?;
            if let Some((k, v)) = out.kv {
                warmup_kv.push((l, k, v));
            }
            h = out.h;
        }
        Ok(h)
    }

    /// Iterative parallel forward over `batch` equal-length sequences.
    ///
    /// Iteration `t` pairs every condensed layer's queries with the
    /// condensed keys/values produced by iteration `t - 1` (the initial
    /// ones for `t = 1`). Iterations up to `detached_iters` are run on a
    /// gradient-free tape, so their outputs reach later iterations as
    /// constants.
    pub fn parallel_forward(
        &self,
        tape: &Tape<T>,
        w: &BoundWeights<T>,
        ids: &[u32],
        batch: usize,
        opts: &ParallelOptions<T>,
    ) -> Result<ForwardOutput<T>> {
        let n = self.check_tokens(ids, batch)?;
        if opts.n_iters < 1 {
            return Err(Error::Contract("n_iters must be at least 1".into()));
        }
        if opts.detached_iters >= opts.n_iters {
            return Err(Error::Contract(format!(
                "detached_iters {} must be below n_iters {}",
                opts.detached_iters, opts.n_iters
            )));
        }
        let positions: Vec<usize> = (0..n).collect();
        let row_pos = batch_major_positions(&positions, batch);
        let l = self.config.n_layers;

        let Some(first_c) = self.first_condensed() else {
            // No condensed layers: a single pass is exact.
            let mut warmup_kv = Vec::new();
            let h0 = tape.embedding(&w.embed, ids)?;
            let h = self.run_layers(tape, w, 0..l, h0, batch, &positions, None, &mut warmup_kv)?;
            let logits = if opts.compute_logits { Some(self.logits(tape, w, &h)?) } else { None };
            let trace = if opts.keep_trace {
                vec![IterationState { iteration: 1, hidden: h.value().clone(), kv: None }]
            } else {
                Vec::new()
            };
            return Ok(ForwardOutput {
                batch,
                tokens: n,
                hidden: h,
                logits,
                condensed_kv: None,
                condensed_input: None,
                warmup_kv,
                trace,
            });
        };

        let kw = self.config.kv_width();
        let (k0, v0) = match &opts.initial_kv {
            InitialKv::Zero => (Tensor::zeros(&[batch * n, kw]), Tensor::zeros(&[batch * n, kw])),
            InitialKv::Given { k, v } => {
                if k.shape() != [batch * n, kw] || v.shape() != [batch * n, kw] {
                    return dim_err(format!(
                        "initial kv {:?}/{:?}, expected [{}, {kw}]",
                        k.shape(),
                        v.shape(),
                        batch * n
                    ));
                }
                (k.clone(), v.clone())
            }
        };
        let mut kv = (Var::constant(k0), Var::constant(v0));

        // Layers below the first condensed layer do not depend on the
        // condensed keys/values, so their output is shared by all
        // iterations of the same mode.
        let no_grad = Tape::no_grad();
        let frozen = w.detached();
        let mut prefix: [Option<(Var<T>, Vec<(usize, Var<T>, Var<T>)>)>; 2] = [None, None];

        let mut trace = Vec::new();
        let mut last = None;
        for it in 1..=opts.n_iters {
            let live = it > opts.detached_iters;
            let (t, wt) = if live { (tape, w) } else { (&no_grad, &frozen) };
            let slot = usize::from(live);
            if prefix[slot].is_none() {
                let mut wkv = Vec::new();
                let h0 = t.embedding(&wt.embed, ids)?;
                let h = self.run_layers(t, wt, 0..first_c, h0, batch, &positions, None, &mut wkv)?;
                prefix[slot] = Some((h, wkv));
            }
            let (h_prefix, prefix_kv) = prefix[slot].clone().expect("prefix computed");
            let mut warmup_kv = prefix_kv;
            let seg = KvSegment::new(kv.0.clone(), kv.1.clone(), n, KvLayout::BatchMajor);
            let h = self.run_layers(t, wt, first_c..l, h_prefix, batch, &positions, Some(&seg), &mut warmup_kv)?;
            let produced = self.condensed_projection(t, wt, &h, &row_pos)?.expect("condensed layers imply a condensed pair");
            if opts.keep_trace {
                trace.push(IterationState {
                    iteration: it,
                    hidden: h.value().clone(),
                    kv: Some((produced.0.value().clone(), produced.1.value().clone())),
                });
            }
            let consumed = std::mem::replace(&mut kv, produced.clone());
            last = Some((h, warmup_kv, produced, consumed));
        }
        let (h, warmup_kv, produced, consumed) = last.expect("at least one iteration");
        let logits = if opts.compute_logits { Some(self.logits(tape, w, &h)?) } else { None };
        Ok(ForwardOutput {
            batch,
            tokens: n,
            hidden: h,
            logits,
            condensed_kv: Some(produced),
            condensed_input: Some(consumed),
            warmup_kv,
            trace,
        })
    }

    /// Processes one position for a batch of sequences given everything
    /// cached before it. Condensed layers read only strictly earlier
    /// positions; the first token reads nothing and gets zero attention.
    pub fn token_step(
        &self,
        tape: &Tape<T>,
        w: &BoundWeights<T>,
        ids: &[u32],
        position: usize,
        past: &PastKv<T>,
        compute_logits: bool,
    ) -> Result<StepOutput<T>> {
        let batch = ids.len();
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let geo = self.config.geometry();
        let pos = [position];
        let mut h = tape.embedding(&w.embed, ids)?;
        let mut warmup_kv = Vec::new();
        for (l, layer) in w.layers.iter().enumerate() {
            let src = match &past.layers[l] {
                Some((segs, positions)) if self.roles[l].is_warmup() => {
                    KvSource::Own { past: segs, past_positions: positions }
                }
                None if !self.roles[l].is_warmup() => {
                    KvSource::External { segments: &past.condensed.0, positions: &past.condensed.1 }
                }
                _ => return Err(Error::Contract(format!("past kv does not match the role of layer {l}"))),
            };
            let out = transformer_block(tape, layer, &geo, &self.rope, &h, batch, &pos, src)?;
            if let Some((k, v)) = out.kv {
                warmup_kv.push((l, k, v));
            }
            h = out.h;
        }
        let condensed_kv = self.condensed_projection(tape, w, &h, &vec![position; batch])?;
        let logits = if compute_logits { Some(self.logits(tape, w, &h)?) } else { None };
        Ok(StepOutput { hidden: h, logits, warmup_kv, condensed_kv })
    }

    /// Strictly left-to-right forward: each position is processed only
    /// after all earlier positions have produced their keys/values.
    pub fn sequential_forward(&self, tape: &Tape<T>, w: &BoundWeights<T>, ids: &[u32], batch: usize) -> Result<ForwardOutput<T>> {
        let n = self.check_tokens(ids, batch)?;
        let mut past = PastKv::empty(&self.roles);
        let mut hiddens = Vec::with_capacity(n);
        let mut warm: Vec<(usize, Vec<Var<T>>, Vec<Var<T>>)> =
            self.roles.iter().enumerate().filter(|(_, r)| r.is_warmup()).map(|(l, _)| (l, vec![], vec![])).collect();
        let mut cond_k = Vec::with_capacity(n);
        let mut cond_v = Vec::with_capacity(n);
        for t in 0..n {
            let col: Vec<u32> = (0..batch).map(|b| ids[b * n + t]).collect();
            let step = self.token_step(tape, w, &col, t, &past, false)?;
            for ((l, k, v), slot) in step.warmup_kv.into_iter().zip(warm.iter_mut()) {
                let (segs, positions) = past.layers[l].as_mut().expect("warmup layer");
                segs.push(KvSegment::new(k.clone(), v.clone(), 1, KvLayout::TokenMajor));
                positions.push(t);
                slot.1.push(k);
                slot.2.push(v);
            }
            if let Some((k, v)) = step.condensed_kv {
                past.condensed.0.push(KvSegment::new(k.clone(), v.clone(), 1, KvLayout::TokenMajor));
                past.condensed.1.push(t);
                cond_k.push(k);
                cond_v.push(v);
            }
            hiddens.push(step.hidden);
        }
        let hidden = tape.stack_tokens(&hiddens)?;
        let logits = Some(self.logits(tape, w, &hidden)?);
        let condensed_kv = if cond_k.is_empty() {
            None
        } else {
            Some((tape.stack_tokens(&cond_k)?, tape.stack_tokens(&cond_v)?))
        };
        let warmup_kv = warm
            .into_iter()
            .map(|(l, k, v)| Ok((l, tape.stack_tokens(&k)?, tape.stack_tokens(&v)?)))
            .collect::<Result<_>>()?;
        Ok(ForwardOutput {
            batch,
            tokens: n,
            hidden,
            logits,
            condensed_kv,
            condensed_input: None,
            warmup_kv,
            trace: Vec::new(),
        })
    }
}

fn check_weights<T: Scalar>(config: &ModelConfig, roles: &[LayerRole], w: &ModelWeights<T>) -> Result<()> {
    let d = config.hidden_size;
    let geo = config.geometry();
    let expect = |name: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return dim_err(format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
        }
        Ok(())
    };
    expect("embed", &w.embed, &[config.vocab_size, d])?;
    expect("final_norm", &w.final_norm, &[d])?;
    expect("lm_head", &w.lm_head, &[d, config.vocab_size])?;
    if w.layers.len() != roles.len() {
        return Err(Error::Config(format!("{} layers in weights, config has {}", w.layers.len(), roles.len())));
    }
    for (i, (layer, role)) in w.layers.iter().zip(roles).enumerate() {
        geo.check_layer(layer).map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        if layer.has_kv() != role.is_warmup() {
            return Err(Error::Config(format!(
                "layer {i} is {role:?} but {} key/value projections",
                if layer.has_kv() { "has" } else { "lacks" }
            )));
        }
    }
    match (&w.condensed, config.is_standard()) {
        (Some(c), false) => {
            expect("condensed.norm", &c.norm, &[d])?;
            expect("condensed.wk", &c.wk, &[d, config.kv_width()])?;
            expect("condensed.wv", &c.wv, &[d, config.kv_width()])?;
        }
        (None, true) => {}
        (Some(_), true) => return Err(Error::Config("standard model with a condensed projection pair".into())),
        (None, false) => return Err(Error::Config("condensed layers without a condensed projection pair".into())),
    }
    Ok(())
}
