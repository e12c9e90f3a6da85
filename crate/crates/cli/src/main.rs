use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lckv::checkpoint;
use lckv::diag::{self, BenchOptions, SweepRow, SweepSetup};
use lckv::infer::{generate_batch, per_position_nll};
use lckv::train::{evaluate, init_from_standard, train};
use lckv::{
    BenchReport, ByteTokenizer, Corpus, DType, EvalIters, InitKvMode, InitOptions, Model, ModelConfig, RunConfig,
    Scalar, SweepKind,
};

#[derive(Parser)]
#[command(name = "lckv", version, about = "Layer-condensed KV cache decoder: train, evaluate, generate, diagnose")]
struct Cli {
    /// Allow multi-threaded kernels (timings then depend on the machine's load).
    #[arg(long, global = true)]
    parallel: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Start from a standard-decoder checkpoint of the same geometry.
        #[arg(long)]
        init_standard: Option<PathBuf>,
    },
    /// Dev-set loss of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parallel iterations; defaults to the training setting.
        #[arg(long)]
        iters: Option<usize>,
        /// Also write teacher-forced per-position loss of the dev text here.
        #[arg(long)]
        per_position: Option<PathBuf>,
        /// Cap the dev text used for the per-position pass.
        #[arg(long, default_value_t = 4096)]
        per_position_tokens: usize,
        /// Evict with the configured streaming policy.
        #[arg(long)]
        stream: bool,
    },
    /// Continue a text prompt.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        n_tokens: usize,
        #[arg(long)]
        stream: bool,
    },
    /// Decode throughput of a standard decoder and the configured model.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt_len: usize,
        #[arg(long)]
        gen_len: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Change of the condensed keys/values across iterations.
    ProbeKv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_iters: usize,
        #[arg(long, default_value_t = 256)]
        tokens: usize,
    },
    /// Check that the parallel and sequential graphs agree on random models.
    Verify {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Train or evaluate once per value and tabulate the dev loss.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kind: SweepKind,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Trained model for prompt-iteration sweeps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic English-like text corpus.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    lckv::tensor::set_parallel(cli.parallel);
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Verify { seeds } => verify(seeds),
        Command::Corpus { out, bytes, seed } => {
            std::fs::write(&out, lckv::corpus::synthetic_text(bytes, seed))
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        other => {
            let path = match &other {
                Command::Train { config, .. }
                | Command::Eval { config, .. }
                | Command::Generate { config, .. }
                | Command::Bench { config, .. }
                | Command::ProbeKv { config, .. }
                | Command::Sweep { config, .. } => config.clone(),
                Command::Verify { .. } | Command::Corpus { .. } => unreachable!(),
            };
            let cfg = RunConfig::load(&path)?;
            match cfg.model.dtype {
                DType::Float32 => run_typed::<f32>(other, &cfg),
                DType::Float64 => run_typed::<f64>(other, &cfg),
            }
            .map(|()| ExitCode::SUCCESS)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    let Some(path) = &cfg.paths.corpus else { bail!("paths.corpus is not set") };
    Corpus::load(path, cfg.paths.dev_fraction).with_context(|| format!("loading corpus {}", path.display()))
}

fn load<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<Model<T>> {
    checkpoint::load_model(path, &cfg.model).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run_typed<T: Scalar>(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let hash = diag::config_hash(cfg);
    let out_dir = &cfg.paths.output_dir;
    let stdout = std::io::stdout();
    match cmd {
        Command::Train { init_standard, .. } => {
            let data = corpus(cfg)?;
            let mut model = match (&init_standard, &cfg.paths.checkpoint_in) {
                (Some(_), Some(_)) => bail!("--init-standard and paths.checkpoint_in are exclusive"),
                (Some(p), None) => {
                    let std_cfg = ModelConfig { warmup_count: cfg.model.n_layers, ..cfg.model.clone() };
                    let std_w = checkpoint::read::<T>(p, &std_cfg)?;
                    let (w, report) = init_from_standard(&std_w, &std_cfg, &cfg.model)?;
                    eprintln!("initialized from standard decoder; dropped {} key/value pairs", report.discarded_pairs);
                    Model::from_weights(cfg.model.clone(), w)?
                }
                (None, Some(p)) => load(cfg, p)?,
                (None, None) => Model::random(cfg.model.clone(), cfg.train.seed, InitOptions::default())?,
            };
            let log_path = out_dir.join(format!("train_{hash}.csv"));
            let mut log = create(&log_path)?;
            let report = train(&mut model, &data.train, &cfg.train, Some(&mut log))?;
            log.flush()?;
            let ck = cfg.paths.checkpoint_out.clone().unwrap_or_else(|| out_dir.join(format!("model_{hash}.ckpt")));
            if let Some(dir) = ck.parent() {
                std::fs::create_dir_all(dir)?;
            }
            checkpoint::write(&model.weights, &ck)?;
            let dev = evaluate(&model, &data.dev, cfg.train.seq_len, EvalIters::Training, 16)?;
            println!(
                "steps={} tokens={} seconds={:.1} dev_loss={:.6} checkpoint={} log={}",
                report.steps,
                report.tokens_seen,
                report.seconds,
                dev.loss,
                ck.display(),
                log_path.display()
            );
        }
        Command::Eval { checkpoint, iters, per_position, per_position_tokens, stream, .. } => {
            let data = corpus(cfg)?;
            let model = load::<T>(cfg, &checkpoint)?;
            let mode = iters.map_or(EvalIters::Training, EvalIters::Iterations);
            let r = evaluate(&model, &data.dev, cfg.train.seq_len, mode, 16)?;
            println!("dev_loss={:.6} perplexity={:.4} tokens={}", r.loss, r.perplexity(), r.tokens);
            if let Some(path) = per_position {
                let policy = lckv::StreamingPolicy { enabled: stream, ..cfg.streaming };
                let text = &data.dev[..data.dev.len().min(per_position_tokens)];
                let trace = per_position_nll(&model, text, &policy)?;
                let mut out = create(&path)?;
                trace.write_csv(&mut out)?;
                out.flush()?;
                println!("per_position_mean_nll={:.6}", trace.mean());
            }
        }
        Command::Generate { checkpoint, prompt, n_tokens, stream, .. } => {
            let model = load::<T>(cfg, &checkpoint)?;
            let policy = lckv::StreamingPolicy { enabled: stream || cfg.streaming.enabled, ..cfg.streaming };
            let ids = ByteTokenizer.encode(prompt.as_bytes());
            let iters = cfg.model.train_m + cfg.model.train_b;
            let out = generate_batch(&model, &[ids], n_tokens, iters, &cfg.sampling, &policy)?;
            let tokens = &out.tokens[0];
            let mut w = stdout.lock();
            writeln!(w, "{}", tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" "))?;
            w.write_all(&ByteTokenizer.decode(tokens)?)?;
            writeln!(w)?;
        }
        Command::Bench { prompt_len, gen_len, batches, repeats, .. } => {
            let std_cfg = ModelConfig { warmup_count: cfg.model.n_layers, ..cfg.model.clone() };
            let standard = Model::<T>::random(std_cfg, cfg.train.seed, InitOptions::default())?;
            let lckv = match &cfg.paths.checkpoint_in {
                Some(p) => load::<T>(cfg, p)?,
                None => Model::random(cfg.model.clone(), cfg.train.seed, InitOptions::default())?,
            };
            let opts = BenchOptions { n_iters: cfg.model.train_m + cfg.model.train_b, seed: cfg.train.seed, repeats, ..Default::default() };
            let rows = diag::throughput_bench(&standard, &lckv, prompt_len, gen_len, &batches, &opts)?;
            BenchReport::write_csv(&rows, &mut stdout.lock())?;
            let mut f = create(&out_dir.join(format!("bench_{hash}.csv")))?;
            BenchReport::write_csv(&rows, &mut f)?;
            f.flush()?;
        }
        Command::ProbeKv { checkpoint, n_iters, tokens, .. } => {
            let model = match &checkpoint {
                Some(p) => load::<T>(cfg, p)?,
                None => Model::random(cfg.model.clone(), cfg.train.seed, InitOptions::default())?,
            };
            let n = tokens.min(cfg.model.max_seq_len);
            let ids: Vec<u32> = match &cfg.paths.corpus {
                Some(_) => corpus(cfg)?.dev.into_iter().take(n).collect(),
                None => ByteTokenizer.encode(&lckv::corpus::synthetic_text(n, cfg.train.seed)),
            };
            let mut trace = diag::kv_convergence_probe(&model, &ids, 1, n_iters)?;
            trace.seed = Some(cfg.train.seed);
            trace.write_csv(&mut stdout.lock())?;
            let mut f = create(&out_dir.join(format!("probe_{hash}.csv")))?;
            trace.write_csv(&mut f)?;
            f.flush()?;
        }
        Command::Sweep { kind, values, checkpoint, .. } => {
            let data = corpus(cfg)?;
            let trained = checkpoint.as_deref().map(|p| load::<T>(cfg, p)).transpose()?;
            let setup = SweepSetup {
                base: cfg.model.clone(),
                train: cfg.train.clone(),
                corpus: &data,
                trained: trained.as_ref(),
                init_seed: cfg.train.seed,
            };
            let rows = diag::sweep(kind, &values, &setup);
            SweepRow::write_csv(&rows, &mut stdout.lock())?;
            let mut f = create(&out_dir.join(format!("sweep_{hash}.csv")))?;
            SweepRow::write_csv(&rows, &mut f)?;
            f.flush()?;
        }
        Command::Verify { .. } | Command::Corpus { .. } => unreachable!(),
    }
    Ok(())
}

fn verify(seeds: u64) -> Result<ExitCode> {
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..seeds {
        for l in [2, 4, 8] {
            for w in [0, 2] {
                for n in [1, 4, 8, 16] {
                    for mode in [InitKvMode::Zero, InitKvMode::Random] {
                        let cfg = ModelConfig::tiny(l, w);
                        let r = diag::equivalence_check(&cfg, seed, n, mode)?;
                        cases += 1;
                        worst = worst.max(r.converged_max());
                        if !r.passed() {
                            failures += 1;
                            println!(
                                "FAIL seed={seed} layers={l} warmup={w} tokens={n} init={mode:?} deviation={:.3e}",
                                r.converged_max()
                            );
                        }
                    }
                }
            }
        }
    }
    println!("{cases} cases, {failures} failed, max converged deviation {worst:.3e}");
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
