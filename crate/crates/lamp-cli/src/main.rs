//! `lamp`: train, account for, verify and export low-parameter soft prompts.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed gradient check),
//! 2 invalid arguments or configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use lamp_core::analysis::{self, cost_report, dispersion_stats, vanilla_cost_report};
use lamp_core::backbone::FrozenBackbone;
use lamp_core::checkpoint;
use lamp_core::config::{run_experiment, ExperimentConfig, CHECKPOINT_FILE};
use lamp_core::error::LampError;
use lamp_core::gradcheck::{gradcheck, GradcheckOptions};
use lamp_core::matrix::Matrix;
use lamp_core::prompt::{init_source_prompt, PoolConfig, ReconstructionMode, SoftPrompt, VocabTable};
use lamp_core::trainer::{batch_gradients, encode_examples, LoopOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BENCH_FILE: &str = "bench.json";
const EMBEDDINGS_FILE: &str = "embeddings.csv";

#[derive(Parser)]
#[command(name = "lamp", version, about = "Low-parameter prompt tuning experiments")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the prompt and batch-order seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Fixed-order reductions and zeroed wall-clock fields.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a prompt; writes metrics.ndjson, prompt.lamp and cost.json.
    Train,
    /// Print the parameter and cost accounting as JSON.
    CountParams {
        #[arg(long)]
        l: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: usize,
        /// Average-pooling block.
        #[arg(long, default_value_t = 1)]
        p: usize,
        /// Input length used for the attention cost.
        #[arg(long, default_value_t = 0)]
        m: usize,
        #[arg(long, default_value = "lamp")]
        method: String,
    },
    /// Compare analytic and central-difference prompt gradients.
    Gradcheck {
        #[arg(long, default_value_t = lamp_core::gradcheck::DEFAULT_COORDS)]
        coords: usize,
    },
    /// Median forward+backward time per pooling block.
    Bench {
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        pool_blocks: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Examples per timed step.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Write reconstructed prompt coordinates as CSV and print dispersion statistics.
    Export {
        checkpoint: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Export the pooled rows fed to the model instead.
        #[arg(long)]
        pooled: bool,
    },
    /// Write a freshly initialized LAMP checkpoint.
    Decompose {
        #[arg(long)]
        l: usize,
        /// Required unless a vocabulary file is given.
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        r: usize,
        /// Vocabulary CSV: frequency rank followed by the embedding.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Size of the synthetic vocabulary used when no file is given.
        #[arg(long, default_value_t = 5000)]
        vocab_size: usize,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = "verbatim")]
        mode: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LampError> for Failure {
    fn from(e: LampError) -> Self {
        match e {
            LampError::Config { .. } | LampError::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::CountParams { l, d, r, p, m, method } => cmd_count_params(*l, *d, *r, *p, *m, method),
        Command::Gradcheck { coords } => cmd_gradcheck(&cli, *coords),
        Command::Bench {
            pool_blocks,
            iters,
            batch,
        } => cmd_bench(&cli, pool_blocks, *iters, *batch),
        Command::Export { checkpoint, csv, pooled } => cmd_export(&cli, checkpoint, csv.as_deref(), *pooled),
        Command::Decompose {
            l,
            d,
            r,
            vocab,
            vocab_size,
            top_k,
            mode,
        } => cmd_decompose(&cli, *l, *d, *r, vocab.as_deref(), *vocab_size, *top_k, mode),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let Some(path) = &cli.config else {
        return usage("--config is required for this command");
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(LampError::from)?);
    Ok(())
}

fn cmd_train(cli: &Cli) -> CliResult<ExitCode> {
    let cfg = load_config(cli)?;
    let opts = LoopOptions {
        record_wall_time: !cli.deterministic,
    };
    let outcome = run_experiment(&cfg, opts)?;
    if outcome.digest_before != outcome.digest_after {
        return Err(Failure::Runtime("backbone weights changed during training".into()));
    }
    outcome.write(&cfg.output_dir)?;
    print_json(&outcome.cost)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_count_params(l: usize, d: usize, r: usize, p: usize, m: usize, method: &str) -> CliResult<ExitCode> {
    if l == 0 || d == 0 {
        return usage("--l and --d must be at least 1");
    }
    let report = match method {
        "lamp" => {
            if r == 0 || r > l.min(d) {
                return usage(format!("--r ({r}) must lie in 1..=min(--l, --d) ({})", l.min(d)));
            }
            if p == 0 || l % p != 0 {
                return usage(format!("--p ({p}) must be positive and divide --l ({l})"));
            }
            cost_report(l, d, r, p, m)?
        }
        "vanilla-pt" => vanilla_cost_report(l, d, m)?,
        other => return usage(format!("unknown method {other:?}; expected lamp or vanilla-pt")),
    };
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cli: &Cli, coords: usize) -> CliResult<ExitCode> {
    let cfg = load_config(cli)?;
    let bb = FrozenBackbone::new(cfg.backbone.clone())?;
    let data = cfg.task.generate()?;
    let prompt = cfg.initial_prompt(&bb)?;
    let n = cfg.train.batch_size.min(data.train.len());
    let batch = encode_examples(&bb, &data.train[..n])?;
    let opts = GradcheckOptions {
        coords,
        seed: cfg.seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&prompt, &bb, &batch, &opts)?;
    print_json(&report)?;
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[derive(Serialize)]
struct BenchRow {
    p: usize,
    prompt_rows: usize,
    median_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_bench(cli: &Cli, blocks: &[usize], iters: usize, batch: usize) -> CliResult<ExitCode> {
    if blocks.is_empty() {
        return usage("--pool-blocks needs at least one block size");
    }
    if iters == 0 || batch == 0 {
        return usage("--iters and --batch must be at least 1");
    }
    let cfg = load_config(cli)?;
    if let Some(&p) = blocks.iter().find(|&&p| p == 0 || cfg.prompt.l % p != 0) {
        return usage(format!("--pool-blocks entry {p} must be positive and divide prompt.l ({})", cfg.prompt.l));
    }
    let bb = FrozenBackbone::new(cfg.backbone.clone())?;
    let data = cfg.task.generate()?;
    let n = batch.min(data.train.len());
    let examples = encode_examples(&bb, &data.train[..n])?;

    let mut rows = Vec::with_capacity(blocks.len());
    for &p in blocks {
        let mut c = cfg.clone();
        c.prompt.pooling = if p == 1 { PoolConfig::none() } else { PoolConfig::average(p) };
        let prompt = c.initial_prompt(&bb)?;
        batch_gradients(&prompt, &bb, &examples)?;
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let start = Instant::now();
            batch_gradients(&prompt, &bb, &examples)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(BenchRow {
            p,
            prompt_rows: prompt.rows_fed(),
            median_ms: median(times),
        });
    }
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out)?;
        let text = serde_json::to_string_pretty(&rows).map_err(LampError::from)?;
        std::fs::write(out.join(BENCH_FILE), text + "\n")?;
    }
    print_json(&rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(cli: &Cli, path: &Path, csv: Option<&Path>, pooled: bool) -> CliResult<ExitCode> {
    let prompt = checkpoint::load(path)?;
    let tokens = if pooled {
        prompt.materialize()?
    } else {
        prompt.reconstructed()?
    };
    let target = match (csv, &cli.out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(dir)) => {
            std::fs::create_dir_all(dir)?;
            dir.join(EMBEDDINGS_FILE)
        }
        (None, None) => PathBuf::from(EMBEDDINGS_FILE),
    };
    analysis::export_embeddings(&tokens, &target)?;
    if tokens.rows() >= 2 {
        print_json(&dispersion_stats(&tokens)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_decompose(
    cli: &Cli,
    l: usize,
    d: Option<usize>,
    r: usize,
    vocab_path: Option<&Path>,
    vocab_size: usize,
    top_k: Option<usize>,
    mode: &str,
) -> CliResult<ExitCode> {
    let mode = match mode {
        "verbatim" => ReconstructionMode::Verbatim,
        "balanced" => ReconstructionMode::Balanced,
        other => return usage(format!("unknown mode {other:?}; expected verbatim or balanced")),
    };
    let seed = cli.seed.unwrap_or(0);
    let vocab = match vocab_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let v = analysis::parse_vocab_csv(&text)?;
            if let Some(d) = d {
                if d != v.width() {
                    return usage(format!("--d ({d}) does not match the vocabulary width ({})", v.width()));
                }
            }
            v
        }
        None => {
            let Some(d) = d else {
                return usage("--d is required without --vocab");
            };
            if d == 0 || vocab_size == 0 {
                return usage("--d and --vocab-size must be at least 1");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            VocabTable::synthetic_zipf(Matrix::random_normal(vocab_size, d, 1.0, &mut rng), seed)
        }
    };
    let width = vocab.width();
    if l == 0 {
        return usage("--l must be at least 1");
    }
    if r == 0 || r > l.min(width) {
        return usage(format!("--r ({r}) must lie in 1..=min(--l, --d) ({})", l.min(width)));
    }
    let top_k = top_k.unwrap_or(vocab.vocab_size());
    if top_k == 0 || top_k > vocab.vocab_size() {
        return usage(format!("--top-k ({top_k}) must lie in 1..={}", vocab.vocab_size()));
    }
    let source = init_source_prompt(&vocab, l, top_k, seed)?;
    let prompt = SoftPrompt::lamp(&source, r, mode, PoolConfig::none(), seed)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    checkpoint::save(&prompt, dir.join(CHECKPOINT_FILE))?;
    print_json(&analysis::prompt_cost_report(&prompt, 0))?;
    Ok(ExitCode::SUCCESS)
}
