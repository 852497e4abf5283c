//! `pktl`: synthesize port data, train and evaluate forecasters, run the
//! prompt ablation and grid search, and export analyses.
//!
//! Every command reads an optional JSON config (`--config`), applies its
//! flags on top, validates the result and writes it to
//! `<out>/effective_config.json` before doing any work.

mod commands;
mod config;
mod failure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use pk_timellm::analyze::ActivationMode;
use pk_timellm::data::PromptMode;
use pk_timellm::series::Split;

use config::{Command, RunConfig};
use failure::Failure;

#[derive(Parser)]
#[command(name = "pktl", version, about = "Port throughput forecasting with prompt-conditioned reprogramming")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Directory with ct.csv and the context CSVs.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Ignore berth, weather and calendar files.
    #[arg(long)]
    no_context: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    prompt_mode: Option<PromptMode>,
    /// Input window length.
    #[arg(long = "T", value_name = "N")]
    t: Option<usize>,
    /// Forecast horizon.
    #[arg(long = "H", value_name = "N")]
    h: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic port world (ct, berth, weather, calendar, tat CSVs).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        port: Option<String>,
    },
    /// Train one model; writes a checkpoint, loss trace and alignment snapshots.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long, value_parser = parse_mode)]
        prompt_mode: Option<PromptMode>,
    },
    /// Forecast the horizon after an anchor date.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Last observed day (YYYY-MM-DD); defaults to the series end.
        #[arg(long)]
        anchor: Option<NaiveDate>,
        #[arg(long, value_parser = parse_mode)]
        prompt_mode: Option<PromptMode>,
    },
    /// Train without prompt, with the static prompt and with the port-knowledge prompt.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Run a single seed instead of `ablate.seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run a single input length instead of `ablate.input_lens`.
        #[arg(long = "T", value_name = "N")]
        t: Option<usize>,
        /// Run a single horizon instead of `ablate.horizons`.
        #[arg(long = "H", value_name = "N")]
        h: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train every configuration of the hyperparameter grid.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Export word activations and alignment heatmaps for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Training run directory with alignment.json.
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_parser = parse_activation)]
        mode: Option<ActivationMode>,
        #[arg(long)]
        no_svg: bool,
    },
    /// Fit ln(TAT) on ln(CT).
    Regress {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse().map_err(|e: pk_timellm::error::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: pk_timellm::error::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<ActivationMode, String> {
    s.parse().map_err(|e: pk_timellm::error::Error| e.to_string())
}

fn apply_data(cfg: &mut RunConfig, d: DataArg) {
    if d.data.is_some() {
        cfg.data.dir = d.data;
    }
    if d.no_context {
        cfg.data.context = false;
    }
}

fn apply_model(cfg: &mut RunConfig, m: ModelArgs) {
    let t = &mut cfg.train;
    if let Some(v) = m.seed {
        t.seed = v;
    }
    if let Some(v) = m.prompt_mode {
        t.prompt_mode = v;
    }
    if let Some(v) = m.t {
        t.input_len = v;
    }
    if let Some(v) = m.h {
        t.horizon = v;
    }
    if let Some(v) = m.epochs {
        t.max_epochs = v;
    }
}

/// Resolves the config file and flags into one validated configuration.
fn resolve(cmd: Cmd) -> Result<(Command, RunConfig, PathBuf), Failure> {
    let (kind, common) = match &cmd {
        Cmd::Synth { common, .. } => (Command::Synth, common),
        Cmd::Train { common, .. } => (Command::Train, common),
        Cmd::Eval { common, .. } => (Command::Eval, common),
        Cmd::Forecast { common, .. } => (Command::Forecast, common),
        Cmd::Ablate { common, .. } => (Command::Ablate, common),
        Cmd::Gridsearch { common, .. } => (Command::Gridsearch, common),
        Cmd::Analyze { common, .. } => (Command::Analyze, common),
        Cmd::Regress { common, .. } => (Command::Regress, common),
    };
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let out = common.out.clone();
    match cmd {
        Cmd::Synth { seed, days, port, .. } => {
            if let Some(v) = seed {
                cfg.world.seed = v;
            }
            if let Some(v) = days {
                cfg.world.n_days = v;
            }
            if let Some(v) = port {
                cfg.data.port = v.clone();
                cfg.world.port = v;
            }
        }
        Cmd::Train { data, model, .. } | Cmd::Gridsearch { data, model, .. } => {
            apply_data(&mut cfg, data);
            apply_model(&mut cfg, model);
        }
        Cmd::Eval {
            data,
            checkpoint,
            split,
            prompt_mode,
            ..
        } => {
            apply_data(&mut cfg, data);
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if prompt_mode.is_some() {
                cfg.eval.prompt_mode = prompt_mode;
            }
        }
        Cmd::Forecast {
            data,
            checkpoint,
            anchor,
            prompt_mode,
            ..
        } => {
            apply_data(&mut cfg, data);
            if checkpoint.is_some() {
                cfg.forecast.checkpoint = checkpoint;
            }
            if anchor.is_some() {
                cfg.forecast.anchor = anchor;
            }
            if prompt_mode.is_some() {
                cfg.forecast.prompt_mode = prompt_mode;
            }
        }
        Cmd::Ablate {
            data, seed, t, h, epochs, ..
        } => {
            apply_data(&mut cfg, data);
            if let Some(v) = seed {
                cfg.ablate.seeds = vec![v];
            }
            if let Some(v) = t {
                cfg.ablate.input_lens = vec![v];
            }
            if let Some(v) = h {
                cfg.ablate.horizons = vec![v];
            }
            if let Some(v) = epochs {
                cfg.train.max_epochs = v;
            }
        }
        Cmd::Analyze {
            checkpoint,
            run,
            top_k,
            mode,
            no_svg,
            ..
        } => {
            let a = &mut cfg.analysis;
            if checkpoint.is_some() {
                a.checkpoint = checkpoint;
            }
            if run.is_some() {
                a.run_dir = run;
            }
            if let Some(k) = top_k {
                a.top_k = k;
            }
            if let Some(m) = mode {
                a.mode = m;
            }
            if no_svg {
                a.svg = false;
            }
        }
        Cmd::Regress { data, .. } => apply_data(&mut cfg, data),
    }
    cfg.validate(kind)?;
    Ok((kind, cfg, out))
}

fn run(kind: Command, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Failure::config(e.to_string()))?;
    let path = out.join("effective_config.json");
    std::fs::write(&path, text + "\n").map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    match kind {
        Command::Synth => commands::synth(cfg, out),
        Command::Train => commands::train_cmd(cfg, out),
        Command::Eval => commands::eval(cfg, out),
        Command::Forecast => commands::forecast(cfg, out),
        Command::Ablate => commands::ablate(cfg, out),
        Command::Gridsearch => commands::gridsearch(cfg, out),
        Command::Analyze => commands::analyze(cfg, out),
        Command::Regress => commands::regress(cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli.command).and_then(|(kind, cfg, out)| run(kind, &cfg, &out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
