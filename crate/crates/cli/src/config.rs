//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then a checkpoint's saved
//! snapshot (eval only), then a config file, then a preset, then individual
//! command-line overrides. Every key is known up front; anything else is
//! rejected before work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use augwm_core::adapter::{AdaptConfig, AdaptMode};
use augwm_core::augment::{AugKind, AugRange};
use augwm_core::env::{DynamicsParams, EnvKind, PolicyMix};
use augwm_core::eval::{GridSpec, SwitchSpec};
use augwm_core::sac::{ActMode, SacConfig};
use augwm_core::trainer::TrainConfig;
use augwm_core::world_model::{EnsembleConfig, PenaltyKind};

use crate::Invalid;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec { key: "seed", default: "0", help: "master seed for data, training and evaluation streams" },
    KeySpec { key: "env.kind", default: "msd", help: "environment: msd, pm2d or pendulum" },
    KeySpec { key: "data.n", default: "20000", help: "transitions to collect" },
    KeySpec { key: "data.random_frac", default: "0.5", help: "share of steps taken by the uniform random policy" },
    KeySpec { key: "data.mediocre_frac", default: "0.5", help: "share of steps taken by the scripted controller" },
    KeySpec { key: "aug.kind", default: "das", help: "training augmentation: none, rad, rans or das" },
    KeySpec { key: "aug.train_lo", default: "0.5", help: "lower bound of the training scale distribution" },
    KeySpec { key: "aug.train_hi", default: "1.5", help: "upper bound of the training scale distribution" },
    KeySpec { key: "model.n", default: "5", help: "ensemble members" },
    KeySpec { key: "model.hidden", default: "64,64", help: "hidden layer widths of each member" },
    KeySpec { key: "model.epochs", default: "50", help: "passes over the data per member" },
    KeySpec { key: "model.batch", default: "256", help: "minibatch size for model fitting" },
    KeySpec { key: "model.lr", default: "0.001", help: "Adam learning rate for model fitting" },
    KeySpec { key: "model.holdout_frac", default: "0.1", help: "share of the data held out for validation" },
    KeySpec { key: "model.bootstrap", default: "true", help: "resample the training split per member" },
    KeySpec { key: "model.penalty", default: "max_aleatoric", help: "uncertainty penalty: max_aleatoric or disagreement" },
    KeySpec { key: "train.h", default: "5", help: "model rollout length" },
    KeySpec { key: "train.lambda", default: "1", help: "uncertainty penalty weight (0 disables the penalty)" },
    KeySpec { key: "train.rollout_batch", default: "256", help: "model rollouts started per epoch" },
    KeySpec { key: "train.epochs", default: "auto", help: "policy epochs; auto is 100 without augmentation and 225 with it" },
    KeySpec { key: "train.real_data_frac", default: "0.05", help: "share of each SAC batch drawn from the offline data" },
    KeySpec { key: "train.use_context", default: "true", help: "condition actor and critics on the augmentation scale" },
    KeySpec { key: "train.grad_steps", default: "10", help: "SAC updates per epoch" },
    KeySpec { key: "train.sac_batch", default: "256", help: "SAC minibatch size" },
    KeySpec { key: "train.buffer_capacity", default: "200000", help: "model replay buffer size (FIFO)" },
    KeySpec { key: "train.ckpt_every", default: "25", help: "write a policy checkpoint every this many epochs (0 disables)" },
    KeySpec { key: "sac.hidden", default: "64,64", help: "hidden layer widths of actor and critics" },
    KeySpec { key: "sac.gamma", default: "0.99", help: "discount factor" },
    KeySpec { key: "sac.alpha", default: "0.2", help: "entropy temperature" },
    KeySpec { key: "sac.tau", default: "0.005", help: "target network averaging rate" },
    KeySpec { key: "sac.lr", default: "0.0003", help: "Adam learning rate for actor and critics" },
    KeySpec { key: "adapt.k", default: "50", help: "steps collected before the learned context is used" },
    KeySpec { key: "adapt.clip_lo", default: "0.93", help: "lower bound of test-time contexts" },
    KeySpec { key: "adapt.clip_hi", default: "1.07", help: "upper bound of test-time contexts" },
    KeySpec { key: "adapt.delta_floor", default: "0.001", help: "smallest predicted change used as a divisor" },
    KeySpec { key: "adapt.ema", default: "0", help: "context smoothing weight on the previous value, in [0, 1)" },
    KeySpec { key: "adapt.window", default: "100", help: "most recent steps the linear model is fitted on" },
    KeySpec { key: "adapt.ridge", default: "1e-6", help: "ridge penalty of the linear model" },
    KeySpec { key: "adapt.clip_oracle", default: "true", help: "clip oracle contexts to the test-time bounds" },
    KeySpec { key: "adapt.action_mode", default: "deterministic", help: "evaluation actions: deterministic or stochastic" },
    KeySpec { key: "eval.modes", default: "default,learned,oracle", help: "context modes to evaluate, comma separated" },
    KeySpec { key: "eval.masses", default: "0.5,0.75,1.0,1.25,1.5", help: "mass multipliers of the grid" },
    KeySpec { key: "eval.dampings", default: "0.5,0.75,1.0,1.25,1.5", help: "damping multipliers of the grid" },
    KeySpec { key: "eval.seeds", default: "0,1,2", help: "evaluation seeds" },
    KeySpec { key: "eval.rollouts", default: "5", help: "episodes per grid cell and seed" },
    KeySpec { key: "eval.switch", default: "none", help: "mid-episode switch, e.g. t=100,after_mass=0.75,after_damping=0.5" },
    KeySpec { key: "eval.plot", default: "false", help: "also write SVG plots" },
];

pub const PRESETS: &[(&str, &[(&str, &str)])] = &[
    ("mopo-baseline", &[("aug.kind", "none"), ("train.use_context", "false")]),
    ("augwm-das", &[("aug.kind", "das"), ("train.use_context", "false")]),
    ("augwm-das-context", &[("aug.kind", "das"), ("train.use_context", "true")]),
    ("augwm-rad", &[("aug.kind", "rad"), ("train.use_context", "false")]),
    ("augwm-rans", &[("aug.kind", "rans"), ("train.use_context", "false")]),
];

/// Help text listing every key, its default and the presets.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (key = default):\n");
    for k in KEYS {
        let _ = writeln!(out, "  {:<22} = {:<24} {}", k.key, k.default, k.help);
    }
    out.push_str("\nPresets:\n");
    for (name, pairs) in PRESETS {
        let set: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "  {:<18} {}", name, set.join(" "));
    }
    out.push_str("\nPrecedence: --set/flags > --preset > --config file > defaults.\n");
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.key.to_string(), k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Invalid::new(format!("unknown config key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("registered key")
    }

    /// Apply `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Invalid::new(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (_, pairs) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Invalid::new(format!("unknown preset '{name}'")))?;
        for (k, v) in *pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Layer the assignments of a config file on top. Lines are
    /// `key = value`; `[section]` headers prefix later keys with `section.`;
    /// `#` starts a comment.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Invalid::new(format!("line {}: expected key = value", i + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v).map_err(|e| Invalid::new(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Snapshot that `merge_str` reads back to the same configuration.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn resolve(&self) -> Result<Settings> {
        Settings::from_config(self)
    }
}

/// Typed, validated view of a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub env: EnvKind,
    pub n_transitions: usize,
    pub mix: PolicyMix,
    pub train: TrainConfig,
    pub ckpt_every: usize,
    pub adapt: AdaptConfig,
    pub modes: Vec<AdaptMode>,
    pub grid: GridSpec,
    pub switch: Option<SwitchSpec>,
    pub plot: bool,
}

fn parse<T: FromStr>(cfg: &RunConfig, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = cfg.get(key);
    v.parse::<T>()
        .map_err(|e| Invalid::new(format!("{key} = '{v}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|e| Invalid::new(format!("{key} = '{v}': {e}")))
        })
        .collect()
}

fn list<T: FromStr>(cfg: &RunConfig, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    parse_list(key, cfg.get(key))
}

fn check(r: augwm_core::Result<()>) -> Result<()> {
    r.map_err(|e| Invalid::new(e.to_string()))
}

/// `t=100,after_mass=0.75,after_damping=0.5`; unspecified multipliers stay 1.
pub fn parse_switch(kind: EnvKind, v: &str) -> Result<Option<SwitchSpec>> {
    if v.trim() == "none" {
        return Ok(None);
    }
    let mut t = None;
    let (mut mass, mut damping) = (1.0, 1.0);
    for part in v.split(',') {
        let (k, val) = part
            .split_once('=')
            .ok_or_else(|| Invalid::new(format!("switch '{v}': expected key=value parts")))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Invalid::new(format!("switch '{v}': {e}")));
        match k.trim() {
            "t" => t = Some(val.trim().parse::<usize>().map_err(|e| Invalid::new(format!("switch '{v}': {e}")))?),
            "after_mass" => mass = num(val)?,
            "after_damping" => damping = num(val)?,
            other => return Err(Invalid::new(format!("switch '{v}': unknown part '{other}'"))),
        }
    }
    let t_switch = t.ok_or_else(|| Invalid::new(format!("switch '{v}': missing t")))?;
    let after = DynamicsParams::with_mass_damping(kind, mass, damping);
    check(after.validate(kind))?;
    Ok(Some(SwitchSpec {
        t_switch,
        before: DynamicsParams::nominal(kind),
        after,
    }))
}

impl Settings {
    fn from_config(c: &RunConfig) -> Result<Self> {
        let env: EnvKind = parse(c, "env.kind")?;
        let mix = PolicyMix {
            random_frac: parse(c, "data.random_frac")?,
            mediocre_frac: parse(c, "data.mediocre_frac")?,
        };
        check(mix.validate())?;
        let n_transitions: usize = parse(c, "data.n")?;
        if n_transitions == 0 {
            return Err(Invalid::new("data.n must be positive"));
        }

        let range = AugRange::new(parse(c, "aug.train_lo")?, parse(c, "aug.train_hi")?).map_err(|e| Invalid::new(e.to_string()))?;
        let epochs = match c.get("train.epochs") {
            "auto" => None,
            _ => Some(parse::<usize>(c, "train.epochs")?),
        };
        let model = EnsembleConfig {
            n: parse(c, "model.n")?,
            hidden: list(c, "model.hidden")?,
            epochs: parse(c, "model.epochs")?,
            batch: parse(c, "model.batch")?,
            lr: parse(c, "model.lr")?,
            holdout_frac: parse(c, "model.holdout_frac")?,
            bootstrap: parse(c, "model.bootstrap")?,
            shared_member_stream: false,
            penalty: parse::<PenaltyKind>(c, "model.penalty")?,
        };
        let sac = SacConfig {
            hidden: list(c, "sac.hidden")?,
            gamma: parse(c, "sac.gamma")?,
            alpha: parse(c, "sac.alpha")?,
            tau: parse(c, "sac.tau")?,
            lr: parse(c, "sac.lr")?,
        };
        let train = TrainConfig {
            h: parse(c, "train.h")?,
            lambda: parse(c, "train.lambda")?,
            rollout_batch: parse(c, "train.rollout_batch")?,
            epochs,
            real_data_frac: parse(c, "train.real_data_frac")?,
            aug: parse::<AugKind>(c, "aug.kind")?,
            range,
            use_context: parse(c, "train.use_context")?,
            grad_steps: parse(c, "train.grad_steps")?,
            sac_batch: parse(c, "train.sac_batch")?,
            buffer_capacity: parse(c, "train.buffer_capacity")?,
            sac,
            model,
        };
        check(train.validate())?;

        let action_mode = match c.get("adapt.action_mode") {
            "deterministic" => ActMode::Deterministic,
            "stochastic" => ActMode::Stochastic,
            other => return Err(Invalid::new(format!("adapt.action_mode = '{other}': expected deterministic or stochastic"))),
        };
        let adapt = AdaptConfig {
            k: parse(c, "adapt.k")?,
            clip_lo: parse(c, "adapt.clip_lo")?,
            clip_hi: parse(c, "adapt.clip_hi")?,
            delta_floor: parse(c, "adapt.delta_floor")?,
            ema: parse(c, "adapt.ema")?,
            window: parse(c, "adapt.window")?,
            ridge: parse(c, "adapt.ridge")?,
            clip_oracle: parse(c, "adapt.clip_oracle")?,
            action_mode,
        };
        check(adapt.validate())?;

        let modes: Vec<AdaptMode> = list(c, "eval.modes")?;
        if modes.is_empty() {
            return Err(Invalid::new("eval.modes must name at least one mode"));
        }
        let grid = GridSpec {
            masses: list(c, "eval.masses")?,
            dampings: list(c, "eval.dampings")?,
            seeds: list(c, "eval.seeds")?,
            rollouts_per_cell: parse(c, "eval.rollouts")?,
        };
        check(grid.validate())?;
        let switch = parse_switch(env, c.get("eval.switch"))?;
        if let Some(s) = &switch {
            check(s.validate(augwm_core::env::DEFAULT_HORIZON))?;
        }

        Ok(Self {
            seed: parse(c, "seed")?,
            env,
            n_transitions,
            mix,
            train,
            ckpt_every: parse(c, "train.ckpt_every")?,
            adapt,
            modes,
            grid,
            switch,
            plot: parse(c, "eval.plot")?,
        })
    }
}
