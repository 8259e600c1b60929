mod error;
mod evaluate;
mod export;
mod predict;
mod settings;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;
use settings::KeyValues;

/// Attention-based grapheme-to-phoneme conversion.
#[derive(Parser, Debug)]
#[command(name = "g2p", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, training log and manifest.
    Train(TrainArgs),
    /// Convert words (one per line) to phoneme sequences.
    Predict(PredictArgs),
    /// Score one checkpoint, or a five-model ensemble, on a lexicon.
    Eval(EvalArgs),
    /// Write the phoneme embedding table as tab-separated text.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Key-value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training lexicon.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Development lexicon.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Hold out this many training words as the development set.
    #[arg(long)]
    dev_sample: Option<usize>,
    /// Test lexicon, recorded in the manifest.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// bidirectional or reverse.
    #[arg(long)]
    encoder: Option<String>,
    /// none, global, local_m or local_p.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Half-width of the local attention window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    input_feeding: Option<String>,
    #[arg(long)]
    p_drop: Option<String>,
    /// Attention hidden size, or `auto` for the decoder width.
    #[arg(long)]
    attention_size: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    sampling_floor: Option<String>,
    /// Epoch at which teacher forcing reaches its floor, or `auto`.
    #[arg(long)]
    sampling_horizon: Option<String>,
    /// Gradient norm ceiling, or `none`.
    #[arg(long)]
    clip_norm: Option<String>,
    /// Rows per gradient worker.
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    decode_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, or `auto`.
    #[arg(long)]
    threads: Option<String>,
    /// Search dropout and input feeding over the configured grids.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated dropout values for --grid.
    #[arg(long)]
    p_drop_grid: Option<String>,
    /// Comma-separated input-feeding values for --grid.
    #[arg(long)]
    feeding_grid: Option<String>,
    /// After tuning, retrain on train and dev together for the best epoch count.
    #[arg(long)]
    retrain_full: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.insert(k.to_string(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let num = |n: Option<usize>| n.map(|n| n.to_string());
        put("train", path(&self.train));
        put("dev", path(&self.dev));
        put("dev_sample", num(self.dev_sample));
        put("test", path(&self.test));
        put("out", path(&self.out));
        put("encoder", self.encoder.clone());
        put("attention", self.attention.clone());
        put("layers", num(self.layers));
        put("units", num(self.units));
        put("embed_dim", num(self.embed_dim));
        put("window", num(self.window));
        put("input_feeding", self.input_feeding.clone());
        put("p_drop", self.p_drop.clone());
        put("attention_size", self.attention_size.clone());
        put("batch_size", num(self.batch_size));
        put("epochs", self.epochs.map(|e| e.to_string()));
        put("lr", self.lr.clone());
        put("lr_decay", self.lr_decay.clone());
        put("sampling_floor", self.sampling_floor.clone());
        put("sampling_horizon", self.sampling_horizon.clone());
        put("clip_norm", self.clip_norm.clone());
        put("chunk_size", num(self.chunk_size));
        put("decode_batch", num(self.decode_batch));
        put("seed", self.seed.map(|s| s.to_string()));
        put("threads", self.threads.clone());
        put("grid", self.grid.clone());
        put("p_drop_grid", self.p_drop_grid.clone());
        put("feeding_grid", self.feeding_grid.clone());
        put("retrain_full", self.retrain_full.clone());
        kv
    }
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Word list, one word per line; `-` reads standard input.
    #[arg(long, default_value = "-")]
    input: PathBuf,
    /// Output file; `-` writes standard output.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint; repeat five times with --ensemble.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Reference lexicon.
    #[arg(long)]
    test: PathBuf,
    /// Vote over exactly five checkpoints.
    #[arg(long)]
    ensemble: bool,
    /// Print word-length and per-word error tables.
    #[arg(long)]
    buckets: bool,
    /// Full report file.
    #[arg(long, default_value = "eval_report.txt")]
    report: PathBuf,
    /// Number of worst predictions listed in the report.
    #[arg(long, default_value_t = 50)]
    worst: usize,
    /// Seed for breaking ensemble ties.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output file; `-` writes standard output.
    #[arg(long, default_value = "-")]
    output: PathBuf,
}

pub fn set_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Predict(a) => predict::run(&a),
        Command::Eval(a) => evaluate::run(&a),
        Command::ExportEmbeddings(a) => export::run(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
