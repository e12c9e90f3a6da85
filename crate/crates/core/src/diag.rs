//! Diagnostics: equivalence of the two forward graphs, convergence of the
//! condensed keys/values across iterations, cache accounting, decode
//! throughput and hyperparameter sweeps.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::infer::{generate_batch, SamplingConfig, StreamingPolicy};
use crate::model::{InitOptions, InitialKv, Model, ModelConfig, ParallelOptions};
use crate::tensor::{parallel_enabled, Scalar, SeededRng, Tensor};
use crate::train::{evaluate, train, EvalIters, TrainConfig};

/// Deviation allowed between the parallel and sequential graphs once a
/// token has converged.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKvMode {
    Zero,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub n_tokens: usize,
    pub init_kv: InitKvMode,
    /// `deviation[i][t - 1]`: max |difference| of token `i`'s top hidden
    /// state after iteration `t` against the sequential graph.
    pub deviation: Vec<Vec<f64>>,
}

impl EquivalenceReport {
    /// Largest deviation over iterations `t >= i` (tokens counted from one).
    pub fn converged_max(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, row) in self.deviation.iter().enumerate() {
            for &d in &row[i..] {
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn passed(&self) -> bool {
        self.converged_max() <= EQUIVALENCE_TOLERANCE
    }
}

/// Compares `parallel_forward` with `n_tokens` iterations against the
/// token-by-token graph on a random float64 model.
pub fn equivalence_check(config: &ModelConfig, seed: u64, n_tokens: usize, init_kv: InitKvMode) -> Result<EquivalenceReport> {
    if n_tokens == 0 || n_tokens > 16 {
        return Err(Error::Contract(format!("n_tokens must be in 1..=16, got {n_tokens}")));
    }
    let cfg = ModelConfig { max_seq_len: config.max_seq_len.max(n_tokens), ..config.clone() };
    // A larger init scale than training keeps the condensed path far from
    // negligible, so early iterations visibly differ.
    let model = Model::<f64>::random(cfg.clone(), seed, InitOptions { std: 0.3, zero_head: false })?;
    let mut rng = SeededRng::new(seed).fork(1);
    let batch = 2;
    let ids: Vec<u32> = (0..batch * n_tokens).map(|_| rng.below(cfg.vocab_size) as u32).collect();
    let tape = Tape::no_grad();
    let w = model.constants();
    let seq = model.sequential_forward(&tape, &w, &ids, batch)?;
    let kw = cfg.kv_width();
    let initial_kv = match init_kv {
        InitKvMode::Zero => InitialKv::Zero,
        InitKvMode::Random => InitialKv::Given {
            k: Tensor::randn(&[batch * n_tokens, kw], 1.0, &mut rng),
            v: Tensor::randn(&[batch * n_tokens, kw], 1.0, &mut rng),
        },
    };
    let opts = ParallelOptions { initial_kv, compute_logits: false, keep_trace: true, ..ParallelOptions::new(n_tokens) };
    let par = model.parallel_forward(&tape, &w, &ids, batch, &opts)?;
    let reference = seq.hidden.value();
    let mut deviation = vec![vec![0.0; par.trace.len()]; n_tokens];
    for (t, state) in par.trace.iter().enumerate() {
        for (i, row) in deviation.iter_mut().enumerate() {
            let mut d = 0.0f64;
            for b in 0..batch {
                let r = b * n_tokens + i;
                for (x, y) in state.hidden.row(r).iter().zip(reference.row(r)) {
                    d = d.max((*x - *y).abs());
                }
            }
            row[t] = d;
        }
    }
    // A model without condensed layers runs one exact pass.
    if par.trace.len() == 1 && n_tokens > 1 {
        for row in &mut deviation {
            let d = row[0];
            row.resize(n_tokens, d);
        }
    }
    Ok(EquivalenceReport { seed, n_tokens, init_kv, deviation })
}

/// Mean squared change of the condensed keys and values between
/// consecutive iterations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationTrace {
    /// `mse[i - 1]` compares the output of iteration `i` with that of `i + 1`.
    pub mse: Vec<f64>,
    pub n_iters: usize,
    pub seed: Option<u64>,
    pub config: ModelConfig,
}

impl IterationTrace {
    /// First iteration whose change is at most `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.mse.iter().position(|&m| m <= threshold).map(|i| i + 1)
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "iteration,mse")?;
        for (i, m) in self.mse.iter().enumerate() {
            writeln!(out, "{},{:.9e}", i + 1, m)?;
        }
        Ok(())
    }
}

/// The squared difference is averaged over tokens, heads and dims of K and
/// V taken together.
pub fn kv_mse<T: Scalar>(a: &(Tensor<T>, Tensor<T>), b: &(Tensor<T>, Tensor<T>)) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in [(&a.0, &b.0), (&a.1, &b.1)] {
        for (p, q) in x.data().iter().zip(y.data()) {
            let d = p.as_f64() - q.as_f64();
            sum += d * d;
        }
        n += x.numel();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn kv_convergence_probe<T: Scalar>(model: &Model<T>, ids: &[u32], batch: usize, n_iters: usize) -> Result<IterationTrace> {
    if n_iters < 2 {
        return Err(Error::Contract("the probe needs at least 2 iterations".into()));
    }
    if model.config().is_standard() {
        return Err(Error::Config("a standard decoder has no condensed keys/values".into()));
    }
    let tape = Tape::no_grad();
    let opts = ParallelOptions { compute_logits: false, keep_trace: true, ..ParallelOptions::new(n_iters) };
    let out = model.parallel_forward(&tape, &model.constants(), ids, batch, &opts)?;
    let kvs: Vec<&(Tensor<T>, Tensor<T>)> = out.trace.iter().map(|s| s.kv.as_ref().expect("condensed kv")).collect();
    let mse = kvs.windows(2).map(|p| kv_mse(p[0], p[1])).collect();
    Ok(IterationTrace { mse, n_iters, seed: None, config: model.config().clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Standard,
    Lckv,
}

/// Bytes of cached keys and values for `seq_len` tokens.
pub fn cache_memory_bytes(config: &ModelConfig, seq_len: usize, batch: usize, bytes_per_elem: usize, mode: CacheMode) -> usize {
    let layers = match mode {
        CacheMode::Standard => config.n_layers,
        CacheMode::Lckv => config.cache_layers(),
    };
    2 * layers * batch * seq_len * config.n_kv_heads * config.head_dim() * bytes_per_elem
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub latency_seconds: f64,
    pub throughput_tokens_per_sec: f64,
    pub peak_cache_bytes: usize,
    pub cache_layers: usize,
    pub threads: String,
    pub error: Option<String>,
}

impl BenchReport {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn write_csv(rows: &[BenchReport], out: &mut dyn Write) -> Result<()> {
        writeln!(
            out,
            "model,prompt_len,gen_len,batch,latency_seconds,throughput_tokens_per_sec,peak_cache_bytes,cache_layers,threads,error"
        )?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.3},{},{},{},{}",
                r.model,
                r.prompt_len,
                r.gen_len,
                r.batch,
                r.latency_seconds,
                r.throughput_tokens_per_sec,
                r.peak_cache_bytes,
                r.cache_layers,
                r.threads,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    /// Prompt-encoding iterations for condensed models.
    pub n_iters: usize,
    /// Runs whose cache would exceed this many bytes are recorded as failed.
    pub memory_limit_bytes: usize,
    pub seed: u64,
    /// Timed runs per model and batch size; the median latency is reported.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { n_iters: 9, memory_limit_bytes: 2 << 30, seed: 0, repeats: 3 }
    }
}

fn bench_one<T: Scalar>(
    label: &str,
    model: &Model<T>,
    prompt_len: usize,
    gen_len: usize,
    batch: usize,
    opts: &BenchOptions,
) -> BenchReport {
    let mut report = BenchReport {
        model: label.to_string(),
        prompt_len,
        gen_len,
        batch,
        latency_seconds: 0.0,
        throughput_tokens_per_sec: 0.0,
        peak_cache_bytes: 0,
        cache_layers: model.config().cache_layers(),
        threads: if parallel_enabled() { "multi".into() } else { "single".into() },
        error: None,
    };
    let need = cache_memory_bytes(model.config(), prompt_len + gen_len, batch, std::mem::size_of::<T>(), CacheMode::Lckv);
    if need > opts.memory_limit_bytes {
        report.error = Some(format!("out of memory: cache needs {need} bytes, limit {}", opts.memory_limit_bytes));
        return report;
    }
    let mut rng = SeededRng::new(opts.seed);
    let vocab = model.config().vocab_size.min(256);
    let prompts: Vec<Vec<u32>> =
        (0..batch).map(|_| (0..prompt_len).map(|_| rng.below(vocab) as u32).collect()).collect();
    let iters = if model.config().is_standard() { 1 } else { opts.n_iters };
    let start = Instant::now();
    let run = generate_batch(model, &prompts, gen_len, iters, &SamplingConfig::greedy(), &StreamingPolicy::disabled());
    let latency = start.elapsed().as_secs_f64();
    match run {
        Ok(g) => {
            report.latency_seconds = latency;
            report.throughput_tokens_per_sec = (batch * gen_len) as f64 / latency;
            report.peak_cache_bytes = g.peak_cache_bytes;
            report.cache_layers = g.cache_layers;
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report
}

/// End-to-end generation timing (prompt plus every decode step) for both
/// models at every batch size. The first run of each model is discarded.
/// Repeats alternate between the two models so that load drift on the
/// machine affects both alike.
pub fn throughput_bench<T: Scalar>(
    standard: &Model<T>,
    lckv: &Model<T>,
    prompt_len: usize,
    gen_len: usize,
    batches: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<BenchReport>> {
    let (a, b) = (standard.config(), lckv.config());
    if !a.is_standard() {
        return Err(Error::Config("the baseline must cache every layer".into()));
    }
    if (a.n_layers, a.hidden_size, a.n_heads, a.n_kv_heads, a.intermediate_size, a.vocab_size)
        != (b.n_layers, b.hidden_size, b.n_heads, b.n_kv_heads, b.intermediate_size, b.vocab_size)
    {
        return Err(Error::Config("benchmarked models differ in geometry".into()));
    }
    if gen_len == 0 || batches.is_empty() {
        return Err(Error::Contract("need gen_len >= 1 and at least one batch size".into()));
    }
    let models = [("standard", standard), ("lckv", lckv)];
    for (label, model) in models {
        let _ = bench_one(label, model, prompt_len, gen_len, batches[0], opts);
    }
    let mut rows: [Vec<BenchReport>; 2] = [Vec::new(), Vec::new()];
    for &batch in batches {
        let mut runs: [Vec<BenchReport>; 2] = [Vec::new(), Vec::new()];
        for _ in 0..opts.repeats.max(1) {
            for (i, (label, model)) in models.iter().enumerate() {
                runs[i].push(bench_one(label, model, prompt_len, gen_len, batch, opts));
            }
        }
        for (i, mut r) in runs.into_iter().enumerate() {
            let row = match r.iter().position(|x| !x.ok()) {
                Some(failed) => r.swap_remove(failed),
                None => {
                    r.sort_by(|a, b| a.latency_seconds.total_cmp(&b.latency_seconds));
                    r.swap_remove(r.len() / 2)
                }
            };
            rows[i].push(row);
        }
    }
    let [mut out, lckv_rows] = rows;
    out.extend(lckv_rows);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    WarmupW,
    GradItersB,
    PromptIters,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup_w" => Ok(SweepKind::WarmupW),
            "grad_iters_b" => Ok(SweepKind::GradItersB),
            "prompt_iters" => Ok(SweepKind::PromptIters),
            _ => Err(Error::Config(format!("unknown sweep kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub dev_loss: Option<f64>,
    /// Training tokens per second, or evaluation tokens per second for
    /// prompt-iteration sweeps.
    pub throughput: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn write_csv(rows: &[SweepRow], out: &mut dyn Write) -> Result<()> {
        writeln!(out, "value,dev_loss,throughput,error")?;
        let opt = |x: Option<f64>, p: usize| x.map_or(String::new(), |v| format!("{v:.prec$}", prec = p));
        for r in rows {
            writeln!(
                out,
                "{},{},{},{}",
                r.value,
                opt(r.dev_loss, 6),
                opt(r.throughput, 1),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            )?;
        }
        Ok(())
    }
}

pub struct SweepSetup<'a, T: Scalar> {
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub corpus: &'a Corpus,
    /// Model evaluated by prompt-iteration sweeps.
    pub trained: Option<&'a Model<T>>,
    pub init_seed: u64,
}

/// One row per value; a failing value is recorded and the sweep continues.
pub fn sweep<T: Scalar>(kind: SweepKind, values: &[usize], setup: &SweepSetup<'_, T>) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| match sweep_value(kind, value, setup) {
            Ok((loss, rate)) => SweepRow { value, dev_loss: Some(loss), throughput: Some(rate), error: None },
            Err(e) => SweepRow { value, dev_loss: None, throughput: None, error: Some(e.to_string()) },
        })
        .collect()
}

fn sweep_value<T: Scalar>(kind: SweepKind, value: usize, setup: &SweepSetup<'_, T>) -> Result<(f64, f64)> {
    let eval_len = setup.train.seq_len;
    let dev = &setup.corpus.dev;
    let config = match kind {
        SweepKind::WarmupW => ModelConfig { warmup_count: value, ..setup.base.clone() },
        SweepKind::GradItersB => ModelConfig { train_b: value, ..setup.base.clone() },
        SweepKind::PromptIters => {
            let model = setup.trained.ok_or_else(|| Error::Config("prompt_iters sweeps need a trained model".into()))?;
            let start = Instant::now();
            let r = evaluate(model, dev, eval_len, EvalIters::Iterations(value), 16)?;
            return Ok((r.loss, r.tokens as f64 / start.elapsed().as_secs_f64()));
        }
    };
    config.validate()?;
    let mut model = Model::<T>::random(config, setup.init_seed, InitOptions::default())?;
    let report = train(&mut model, &setup.corpus.train, &setup.train, None)?;
    let r = evaluate(&model, dev, eval_len, EvalIters::Training, 16)?;
    Ok((r.loss, report.tokens_seen as f64 / report.seconds))
}

/// Short stable hash of a serializable value, for output file names.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
