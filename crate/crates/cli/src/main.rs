//! `fsayolo`: generate synthetic scenes, train, evaluate, detect, verify
//! gradients and benchmark the detector.
//!
//! Exit codes: 0 success, 1 failed check or internal error, 2 usage error,
//! 3 bad input (missing file, malformed config or data, bad checkpoint).

mod commands;
mod draw;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fsayolo", version, about = "YOLOv5-style detector with full-separation attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (images/, labels/, classes.txt).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        /// Overrides the seed in `--spec` (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Scene description (`key = value` lines); defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a JSON-lines epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model description (`key = value` lines); desk-scale defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Dataset scored every `--eval-interval` epochs.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        eval_interval: usize,
        /// Epoch log path; defaults to the checkpoint path with `.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; prints the headline columns and writes CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Confidence of the precision/recall operating point.
        #[arg(long, default_value_t = fsayolo::postprocess::DEFAULT_CONF_THRESHOLD)]
        conf: f32,
        #[arg(long, default_value_t = fsayolo::postprocess::DEFAULT_NMS_THRESHOLD)]
        nms: f32,
        /// CSV destination; defaults to the checkpoint path with `.eval.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Detect objects in one PPM image.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = fsayolo::postprocess::DEFAULT_CONF_THRESHOLD)]
        conf: f32,
        #[arg(long, default_value_t = fsayolo::postprocess::DEFAULT_NMS_THRESHOLD)]
        nms: f32,
        /// Directory for `<stem>.txt` and `<stem>.annotated.ppm`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Write each attention map as a grayscale PPM into this directory.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Finite-difference check of every op, block and loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median forward latency with a per-section breakdown.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    pub fn check(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<fsayolo::Error> for Failure {
    fn from(e: fsayolo::Error) -> Self {
        let code = match e {
            fsayolo::Error::Tensor(_) => 1,
            _ => 3,
        };
        Self { code, msg: e.to_string() }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("FSA_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure { code: 2, msg: format!("FSA_THREADS must be a positive integer, got `{v}`") })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::check(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Gen { out, n, seed, spec } => commands::gen(&out, n, seed, spec.as_deref()),
        Command::Train {
            data,
            config,
            epochs,
            out,
            seed,
            lr0,
            batch_size,
            val,
            eval_interval,
            log,
        } => commands::train(commands::TrainArgs {
            data,
            config,
            epochs,
            out,
            seed,
            lr0,
            batch_size,
            val,
            eval_interval,
            log,
        }),
        Command::Eval { data, ckpt, conf, nms, csv } => commands::eval(&data, &ckpt, conf, nms, csv),
        Command::Detect {
            image,
            ckpt,
            conf,
            nms,
            out,
            dump_attention,
        } => commands::detect(&image, &ckpt, conf, nms, &out, dump_attention.as_deref()),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Bench { config, iters, batch } => commands::bench(config.as_deref(), iters, batch),
    }
}

fn main() -> ExitCode {
    // exit quietly when piped into `head` instead of panicking on EPIPE
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
