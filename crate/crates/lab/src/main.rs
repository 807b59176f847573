//! `c2d` — the noisy-label lab CLI.
//!
//! A run directory accumulates every artifact of one experiment: the
//! effective config, datasets, checkpoints, loss dumps, the divide
//! assignment, and the run log. Stages can be run one by one or as a full
//! pipeline via `sweep`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use c2d_lab::config::ExperimentConfig;
use c2d_lab::error::{LabError, Result};
use c2d_lab::io::RunDir;
use c2d_lab::pipeline;
use c2d_core::warmup::InitScheme;

#[derive(Parser)]
#[command(name = "c2d", version, about = "Desk-scale noisy-label learning lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Run directory holding this experiment's artifacts.
    #[arg(long, default_value = "run")]
    dir: PathBuf,
    /// Config file applied on top of the run directory's config.txt.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, e.g. --set noise.rate=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (shorthand for --set run.seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the noisy train split and clean test split.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Self-supervised (or proxy-supervised) encoder pre-training.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// simclr | barlow
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// NT-Xent temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Extra destination for the pre-trained checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised warm-up on the noisy labels with instrumentation.
    Warmup {
        #[command(flatten)]
        common: CommonArgs,
        /// random | ssl | proxy
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "mixup-alpha")]
        mixup_alpha: Option<f64>,
        /// Extra destination for the warm-up checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train only the classifier head during warm-up.
        #[arg(long = "freeze-encoder")]
        freeze_encoder: bool,
    },
    /// Fit the loss GMM and split into labeled/unlabeled.
    Divide {
        #[command(flatten)]
        common: CommonArgs,
        /// Clean-posterior threshold.
        #[arg(long)]
        tau: Option<f64>,
        /// Per-sample loss dump (defaults to DIR/losses.csv).
        #[arg(long)]
        losses: Option<PathBuf>,
        /// Output assignment CSV (defaults to DIR/divide.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Semi-supervised refinement (dividemix | elr | oracle).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        method: Option<String>,
        #[arg(long = "lambda-u")]
        lambda_u: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long = "sharpen-t")]
        sharpen_t: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Linear probe of the final encoder + feature export.
    Probe {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to probe (defaults to the newest stage checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extra destination for the features CSV.
        #[arg(long = "features-out")]
        features_out: Option<PathBuf>,
    },
    /// Align several runs' logs and emit a comparison table.
    Report {
        /// Output CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories to compare (at least two).
        dirs: Vec<PathBuf>,
    },
    /// Full pipelines over a grid of noise rates and init schemes.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated noise rates, e.g. 0.2,0.5,0.8
        #[arg(long)]
        noise: String,
        /// Comma-separated init schemes (defaults to the configured one).
        #[arg(long)]
        init: Option<String>,
        /// Parent directory for the run directories.
        #[arg(long = "out-root", default_value = "sweeps")]
        out_root: PathBuf,
    },
}

/// defaults <- DIR/config.txt <- --config file <- --set pairs <- --seed.
fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let dir_cfg = RunDir::new(&common.dir).config();
    let mut cfg = if dir_cfg.exists() {
        ExperimentConfig::from_text(&std::fs::read_to_string(&dir_cfg)?)?
    } else {
        ExperimentConfig::default()
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("bad config line `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn copy_artifact(from: &std::path::Path, to: Option<&PathBuf>) -> Result<()> {
    if let Some(to) = to {
        if let Some(parent) = to.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::copy(from, to)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = load_config(&common)?;
            pipeline::stage_gen_data(&cfg, &RunDir::new(&common.dir))
        }
        Cmd::Pretrain {
            common,
            method,
            epochs,
            temperature,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.set("ssl.method", &m)?;
            }
            if let Some(e) = epochs {
                cfg.set("ssl.epochs", &e.to_string())?;
            }
            if let Some(t) = temperature {
                cfg.set("ssl.temperature", &t.to_string())?;
            }
            let dir = RunDir::new(&common.dir);
            pipeline::stage_pretrain(&cfg, &dir)?;
            copy_artifact(&dir.pretrain_ckpt(), out.as_ref())
        }
        Cmd::Warmup {
            common,
            init,
            epochs,
            mixup_alpha,
            checkpoint,
            freeze_encoder,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(i) = init {
                cfg.set("warmup.init", &i)?;
            }
            if let Some(e) = epochs {
                cfg.set("warmup.epochs", &e.to_string())?;
            }
            if let Some(a) = mixup_alpha {
                cfg.set("warmup.mixup_alpha", &a.to_string())?;
            }
            if freeze_encoder {
                cfg.set("warmup.freeze_encoder", "true")?;
            }
            let dir = RunDir::new(&common.dir);
            pipeline::stage_warmup(&cfg, &dir)?;
            copy_artifact(&dir.warmup_ckpt(), checkpoint.as_ref())
        }
        Cmd::Divide {
            common,
            tau,
            losses,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = tau {
                cfg.set("lnl.tau", &t.to_string())?;
            }
            let dir = RunDir::new(&common.dir);
            let losses = losses.unwrap_or_else(|| dir.losses());
            let out = out.unwrap_or_else(|| dir.divide());
            pipeline::divide_file(&losses, &out, cfg.resolved_lnl_tau())
        }
        Cmd::Train {
            common,
            method,
            lambda_u,
            tau,
            sharpen_t,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.set("lnl.method", &m)?;
            }
            if let Some(l) = lambda_u {
                cfg.set("lnl.lambda_u", &l.to_string())?;
            }
            if let Some(t) = tau {
                cfg.set("lnl.tau", &t.to_string())?;
            }
            if let Some(t) = sharpen_t {
                cfg.set("lnl.sharpen_t", &t.to_string())?;
            }
            if let Some(e) = epochs {
                cfg.set("lnl.epochs", &e.to_string())?;
            }
            pipeline::stage_train(&cfg, &RunDir::new(&common.dir))
        }
        Cmd::Probe {
            common,
            checkpoint,
            features_out,
        } => {
            let cfg = load_config(&common)?;
            let dir = RunDir::new(&common.dir);
            pipeline::stage_probe(&cfg, &dir, checkpoint.as_deref())?;
            copy_artifact(&dir.features(), features_out.as_ref())
        }
        Cmd::Report { out, dirs } => {
            let refs: Vec<&std::path::Path> = dirs.iter().map(|p| p.as_path()).collect();
            let table = pipeline::compare_report(&refs)?;
            match out {
                Some(path) => c2d_lab::io::write_atomic(&path, table.as_bytes()),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
        Cmd::Sweep {
            common,
            noise,
            init,
            out_root,
        } => {
            let cfg = load_config(&common)?;
            let rates: Vec<f64> = noise
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| LabError::Config(format!("bad noise rate `{s}`")))
                })
                .collect::<Result<_>>()?;
            let inits: Vec<InitScheme> = match init {
                Some(list) => list
                    .split(',')
                    .map(|s| InitScheme::parse(s.trim()).map_err(LabError::from))
                    .collect::<Result<_>>()?,
                None => vec![cfg.warmup_init],
            };
            let dirs = pipeline::sweep(&cfg, &rates, &inits, &out_root)?;
            for d in dirs {
                println!("{}", d.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("c2d: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
