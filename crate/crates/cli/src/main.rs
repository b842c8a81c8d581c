//! `augwm`: collect offline data, train world-model policies, evaluate them
//! under changed dynamics.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::EvalRequest;
use crate::config::RunConfig;

/// A configuration or input problem detected before any work is done.
#[derive(Debug)]
pub struct Invalid(String);

impl Invalid {
    pub fn new(msg: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(Invalid(msg.into()))
    }
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "augwm", version, about = "Dynamics-augmented world models for offline RL", after_help = config::keys_help())]
struct Cli {
    /// Worker threads for ensemble fitting and evaluation. Results do not
    /// depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines (`[section]` headers allowed).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Preset applied after the config file.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,

    /// Override any key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Master seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect an offline dataset on the nominal environment.
    #[command(after_help = config::keys_help())]
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset path; metadata goes to `<PATH>.meta.json`.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Environment (`env.kind`).
        #[arg(long)]
        env: Option<String>,
        /// Transitions to collect (`data.n`).
        #[arg(long)]
        n: Option<usize>,
        /// `data.random_frac`.
        #[arg(long)]
        random_frac: Option<f64>,
        /// `data.mediocre_frac`.
        #[arg(long)]
        mediocre_frac: Option<f64>,
    },
    /// Fit the world model and train a policy inside it.
    #[command(after_help = config::keys_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset written by gen-data.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Run directory for checkpoints, metrics and the resolved config.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Environment the data was collected on (`env.kind`).
        #[arg(long)]
        env: Option<String>,
        /// Policy epochs (`train.epochs`).
        #[arg(long)]
        epochs: Option<String>,
    },
    /// Evaluate a trained run on a dynamics grid and optional switch episode.
    /// The run's saved config is loaded first, below `--config`.
    #[command(after_help = config::keys_help())]
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory written by train.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Output directory for CSVs and plots.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Second run evaluated with the default context as the reference row.
        #[arg(long, value_name = "DIR")]
        compare: Option<PathBuf>,
        /// Context modes, e.g. `default,learned,oracle` (`eval.modes`).
        #[arg(long)]
        mode: Option<String>,
        /// Multipliers used for both mass and damping.
        #[arg(long)]
        grid: Option<String>,
        /// Evaluation seeds (`eval.seeds`).
        #[arg(long)]
        seeds: Option<String>,
        /// Mid-episode switch, e.g. `t=100,after_mass=0.75,after_damping=0.5`.
        #[arg(long)]
        switch: Option<String>,
        /// Write SVG plots next to the CSVs.
        #[arg(long)]
        plot: bool,
    },
}

/// Defaults, then `base` (a saved snapshot), the config file, the preset
/// and finally explicit overrides.
fn build_config(args: &ConfigArgs, base: Option<&str>, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(text) = base {
        c.merge_str(text)?;
    }
    if let Some(path) = &args.config {
        if !path.exists() {
            return Err(Invalid::new(format!("config file {} does not exist", path.display())));
        }
        c.merge_file(path)?;
    }
    if let Some(p) = &args.preset {
        c.apply_preset(p)?;
    }
    for pair in &args.sets {
        c.set_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        c.set("seed", &seed.to_string())?;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Invalid::new("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData {
            cfg,
            out,
            env,
            n,
            random_frac,
            mediocre_frac,
        } => {
            let c = build_config(
                &cfg,
                None,
                &[
                    ("env.kind", env),
                    ("data.n", n.map(|v| v.to_string())),
                    ("data.random_frac", random_frac.map(|v| v.to_string())),
                    ("data.mediocre_frac", mediocre_frac.map(|v| v.to_string())),
                ],
            )?;
            commands::gen_data(&c, &out)
        }
        Command::Train {
            cfg,
            data,
            out,
            env,
            epochs,
        } => {
            let c = build_config(&cfg, None, &[("env.kind", env), ("train.epochs", epochs)])?;
            commands::train(&c, &data, &out)
        }
        Command::Eval {
            cfg,
            ckpt,
            out,
            compare,
            mode,
            grid,
            seeds,
            switch,
            plot,
        } => {
            let saved = commands::checkpoint_config(&ckpt)?;
            let c = build_config(
                &cfg,
                saved.as_deref(),
                &[
                    ("eval.modes", mode),
                    ("eval.masses", grid.clone()),
                    ("eval.dampings", grid),
                    ("eval.seeds", seeds),
                    ("eval.switch", switch),
                    ("eval.plot", plot.then(|| "true".to_string())),
                ],
            )?;
            commands::eval(
                &c,
                &EvalRequest {
                    ckpt: &ckpt,
                    out: &out,
                    compare: compare.as_deref(),
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
