//! `edda`: synthesize data, mine cross-domain pairs, train and evaluate.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for data errors (unreadable or malformed inputs, infeasible specs,
//! training failures, mismatched evaluation setups).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{usage, UsageError};
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "edda", version, about = "Multi-domain recommendation with disentangled embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Mine similar cross-domain node pairs, one file per domain pair.
    Align {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pair file or directory written by `align`; without it the
        /// alignment term is off.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Training output directory or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to `eval` inside the training directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate even if seed, split or data differ from training.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// edda, wo-da, inter, intra or ed-mf.
    #[arg(long)]
    variant: Option<String>,
    /// grec or mf.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    walk_length: Option<usize>,
    #[arg(long)]
    num_walks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Reproducible artifacts: wall-clock columns are written as 0.
    #[arg(long)]
    deterministic: bool,
    /// Any configuration key, e.g. `--set learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("threads", self.threads.map(|v| v.to_string()));
        put("variant", self.variant.clone());
        put("encoder", self.encoder.clone());
        put("beta", self.beta.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("walk_length", self.walk_length.map(|v| v.to_string()));
        put("num_walks", self.num_walks.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        if self.deterministic {
            put("deterministic", Some("true".into()));
        }
        o
    }

    /// Defaults, then `base`, then the config file, then flags.
    fn resolve(&self, base: &[(String, String)]) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in base {
            cfg.set(k, v).map_err(usage)?;
        }
        if let Some(path) = &self.config {
            cfg.load(path).map_err(usage)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(&k, &v).map_err(usage)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v).map_err(usage)?;
        }
        cfg.resolve().map_err(usage)?;
        Ok(cfg)
    }

    /// Whether `key` is set explicitly by the config file or flags.
    fn sets_key(&self, key: &str) -> anyhow::Result<bool> {
        if self.overrides().iter().any(|(k, _)| k == key) || self.set.iter().any(|s| s.split('=').next() == Some(key)) {
            return Ok(true);
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| usage(e.to_string()))?;
            let kv = edda_core::edmodel::parse_key_values(&text).map_err(|e| usage(e.to_string()))?;
            return Ok(kv.contains_key(key));
        }
        Ok(false)
    }
}

fn init_threads(n: usize) -> anyhow::Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed, threads } => {
            init_threads(threads.unwrap_or(0))?;
            commands::synth(&spec, seed, &out)
        }
        Command::Align { data, out, common } => {
            let cfg = common.resolve(&[])?;
            init_threads(cfg.threads)?;
            commands::align(&data, &cfg, &out)
        }
        Command::Train { data, pairs, out, common } => {
            let cfg = common.resolve(&[])?;
            init_threads(cfg.threads)?;
            commands::train(&data, pairs.as_deref(), &cfg, &out)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            force,
            common,
        } => {
            let (_, run_dir) = commands::locate_checkpoint(&checkpoint);
            let tm = commands::training_manifest(run_dir.as_deref())?;
            let mut base = Vec::new();
            for (k, v) in commands::inherited(tm.as_ref()) {
                if !common.sets_key(&k)? {
                    base.push((k, v));
                }
            }
            let cfg = common.resolve(&base)?;
            init_threads(cfg.threads)?;
            let out = match (out, &run_dir) {
                (Some(o), _) => o,
                (None, Some(r)) => r.join("eval"),
                (None, None) => PathBuf::from("eval"),
            };
            commands::eval(&data, &checkpoint, tm.as_ref(), &cfg, &out, force)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
