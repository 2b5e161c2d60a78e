use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use worldmodel_core::config::{Mode, Preset, RunConfig};
use worldmodel_core::pipeline;
use worldmodel_core::server::{replay_mismatches, ServerModels, TranscriptEntry};
use worldmodel_core::{Precision, Real};

mod serve;

#[derive(Parser)]
#[command(name = "worldmodel", version, about = "Train world-model agents and serve their dreams")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// `key = value` config file, applied after the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paper-carracing, paper-doom, desk-track, desk-dodge or mini
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override one key, e.g. `--set vae.epochs=2`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Random-policy rollouts into the run directory
    Collect,
    /// Train V on every collected rollout
    TrainVae,
    /// Encode rollouts to latent statistics with the current V
    Encode,
    /// Train M on the encoded rollouts
    TrainRnn,
    /// Evolve C with CMA-ES, in the real environment or the dream
    TrainController {
        /// C sees z only, through a 40-unit hidden layer
        #[arg(long)]
        v_only: bool,
    },
    /// Average return over fresh episodes
    Evaluate {
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Collect, train and evaluate for `iterate.iterations` rounds
    Iterate,
    /// Every stage in order
    Run,
    /// Print the effective configuration
    Config,
    /// Serve dream sessions over NDJSON, WebSocket and HTTP on one port
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory served for plain HTTP GET requests
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Write one transcript per session into this directory
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Replay a recorded session transcript and compare responses
    Replay {
        transcript: PathBuf,
        /// Session number the transcript was recorded under
        #[arg(long, default_value_t = 0)]
        session: u64,
    },
}

fn config(g: &Global) -> Result<RunConfig> {
    let preset: Preset = match &g.preset {
        Some(p) => p.parse()?,
        None => Preset::DeskDodge,
    };
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &g.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(dir) = &g.run_dir {
        cfg.run_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<S: serde::Serialize + ?Sized>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut cfg = config(&cli.global)?;
    match cli.command {
        Command::Collect => print(&pipeline::collect(&cfg)?),
        Command::TrainVae => print(&pipeline::train_vae(&cfg)?),
        Command::Encode => print(&pipeline::encode(&cfg)?),
        Command::TrainRnn => print(&pipeline::train_rnn(&cfg)?),
        Command::TrainController { v_only } => {
            if v_only {
                cfg.v_only();
            }
            print(&pipeline::train_controller(&cfg)?)
        }
        Command::Evaluate { mode, episodes } => {
            let mode: Mode = match mode {
                Some(m) => m.parse()?,
                None => cfg.evaluate.mode,
            };
            let r = pipeline::evaluate(&cfg, mode, episodes.unwrap_or(cfg.evaluate.episodes))?;
            print(&serde_json::json!({"mode": r.mode, "episodes": r.episodes, "mean": r.mean, "std": r.std}))
        }
        Command::Iterate => print(&pipeline::iterate(&cfg)?),
        Command::Run => print(&pipeline::run_all(&cfg)?),
        Command::Config => print(&cfg),
        Command::Serve {
            port,
            host,
            static_dir,
            record,
        } => {
            let opts = serve::Options {
                addr: format!("{host}:{port}"),
                static_dir,
                record,
            };
            match cfg.precision {
                Precision::F32 => serve::run(ServerModels::<f32>::load(&cfg)?, &opts),
                Precision::F64 => serve::run(ServerModels::<f64>::load(&cfg)?, &opts),
            }
        }
        Command::Replay { transcript, session } => match cfg.precision {
            Precision::F32 => replay::<f32>(&cfg, &transcript, session),
            Precision::F64 => replay::<f64>(&cfg, &transcript, session),
        },
    }
}

fn replay<T: Real>(cfg: &RunConfig, path: &PathBuf, session: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<TranscriptEntry>, _>>()?;
    let models = ServerModels::<T>::load(cfg)?;
    let bad = replay_mismatches(&models, session, &entries);
    println!("{} exchanges, {} mismatches", entries.len(), bad.len());
    if let Some(i) = bad.first() {
        bail!("first mismatch at exchange {i}");
    }
    Ok(())
}
