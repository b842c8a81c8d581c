//! Evaluation protocols: returns over a mass x damping grid, the oracle
//! context, mid-episode dynamics switches, aggregation and significance.
//!
//! Rollout `r` of seed `s` in grid cell `c` always draws from
//! `Rng::new(s, c).derive(r)`, so different modes and checkpoints face the
//! same initial states and noise.

use rayon::prelude::*;

use crate::adapter::{adapt_rollout, AdaptConfig, AdaptMode, AdaptResult, Environment, SwitchEnv};
use crate::env::{DynamicsParams, Env, EnvKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sac::Actor;
use crate::stats::{mean, population_std};
use crate::world_model::EnsembleModel;

pub use crate::stats::{welch_ttest, WelchResult};

pub const DESK_GRID: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
pub const ROLLING_WINDOW: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub masses: Vec<f64>,
    pub dampings: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rollouts_per_cell: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            masses: DESK_GRID.to_vec(),
            dampings: DESK_GRID.to_vec(),
            seeds: vec![0, 1, 2],
            rollouts_per_cell: 5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.masses.is_empty() || self.dampings.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("evaluation grid and seed list must be non-empty".into()));
        }
        if self.rollouts_per_cell == 0 {
            return Err(Error::Config("rollouts_per_cell must be at least 1".into()));
        }
        if self.masses.iter().chain(&self.dampings).any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Config("grid multipliers must be positive".into()));
        }
        Ok(())
    }
}

/// Returns indexed `[mass][damping][seed]`; each entry is the mean over that
/// cell's rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGridResult {
    pub masses: Vec<f64>,
    pub dampings: Vec<f64>,
    pub seeds: Vec<u64>,
    pub returns: Vec<Vec<Vec<f64>>>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl EvalGridResult {
    pub fn from_returns(masses: Vec<f64>, dampings: Vec<f64>, seeds: Vec<u64>, returns: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if returns.len() != masses.len()
            || returns.iter().any(|row| {
                row.len() != dampings.len() || row.iter().any(|cell| cell.len() != seeds.len())
            })
        {
            return Err(Error::invalid("grid returns do not match grid dimensions"));
        }
        let means = returns.iter().map(|row| row.iter().map(|c| mean(c)).collect()).collect();
        let stds = returns.iter().map(|row| row.iter().map(|c| population_std(c)).collect()).collect();
        Ok(Self {
            masses,
            dampings,
            seeds,
            returns,
            means,
            stds,
        })
    }

    /// Per-seed grid means, the samples behind the overall mean.
    pub fn seed_means(&self) -> Vec<f64> {
        let cells = (self.masses.len() * self.dampings.len()) as f64;
        (0..self.seeds.len())
            .map(|k| self.returns.iter().flatten().map(|c| c[k]).sum::<f64>() / cells)
            .collect()
    }

    /// `mass_scale,damping_scale,seed,mean_return` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mass_scale,damping_scale,seed,mean_return\n");
        for (i, m) in self.masses.iter().enumerate() {
            for (j, d) in self.dampings.iter().enumerate() {
                for (k, s) in self.seeds.iter().enumerate() {
                    out.push_str(&format!("{m},{d},{s},{}\n", self.returns[i][j][k]));
                }
            }
        }
        out
    }
}

/// Evaluate `f(mass, damping, rng)` on every cell, seed and rollout, in
/// parallel; results are assembled in grid order.
pub fn run_grid<F>(spec: &GridSpec, f: F) -> Result<EvalGridResult>
where
    F: Fn(f64, f64, &mut Rng) -> Result<f64> + Sync,
{
    spec.validate()?;
    let nd = spec.dampings.len();
    let jobs: Vec<(usize, usize)> = (0..spec.masses.len() * nd)
        .flat_map(|c| (0..spec.seeds.len()).map(move |k| (c, k)))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (m, d) = (spec.masses[c / nd], spec.dampings[c % nd]);
            let base = Rng::new(spec.seeds[k], c as u64);
            let mut total = 0.0;
            for r in 0..spec.rollouts_per_cell {
                total += f(m, d, &mut base.derive(r as u64))?;
            }
            Ok(total / spec.rollouts_per_cell as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ns = spec.seeds.len();
    let returns = (0..spec.masses.len())
        .map(|i| (0..nd).map(|j| values[(i * nd + j) * ns..(i * nd + j + 1) * ns].to_vec()).collect())
        .collect();
    EvalGridResult::from_returns(spec.masses.clone(), spec.dampings.clone(), spec.seeds.clone(), returns)
}

pub fn grid_eval(
    actor: &Actor,
    model: &EnsembleModel,
    kind: EnvKind,
    spec: &GridSpec,
    mode: AdaptMode,
    cfg: &AdaptConfig,
) -> Result<EvalGridResult> {
    cfg.validate()?;
    run_grid(spec, |m, d, rng| {
        let env = Env::new(kind, DynamicsParams::with_mass_damping(kind, m, d))?;
        Ok(adapt_rollout(actor, model, &env, env.horizon(), cfg, mode, rng)?.total_return)
    })
}

/// Episode with the retrospective oracle context.
pub fn oracle_eval<E: Environment>(
    actor: &Actor,
    model: &EnsembleModel,
    env: &E,
    horizon: usize,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    if actor.ctx_dim() == 0 {
        return Err(Error::invalid("oracle evaluation needs a context-conditioned actor"));
    }
    adapt_rollout(actor, model, env, horizon, cfg, AdaptMode::Oracle, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchSpec {
    pub t_switch: usize,
    pub before: DynamicsParams,
    pub after: DynamicsParams,
}

impl SwitchSpec {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.t_switch == 0 || self.t_switch >= horizon {
            return Err(Error::Config(format!(
                "switch step {} must lie strictly between 0 and the horizon {horizon}",
                self.t_switch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchTrace {
    pub mode: AdaptMode,
    pub rewards: Vec<f64>,
    pub rolling: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub contexts: Vec<Vec<f64>>,
    pub oracle_ratios: Vec<Vec<f64>>,
}

impl SwitchTrace {
    pub fn from_result(r: &AdaptResult) -> Self {
        let rewards: Vec<f64> = r.log.iter().map(|l| l.reward).collect();
        let rolling = (0..rewards.len())
            .map(|t| {
                let lo = (t + 1).saturating_sub(ROLLING_WINDOW);
                mean(&rewards[lo..=t])
            })
            .collect();
        let cumulative = rewards
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        Self {
            mode: r.mode,
            rewards,
            rolling,
            cumulative,
            contexts: r.log.iter().map(|l| l.context.clone()).collect(),
            oracle_ratios: r.log.iter().map(|l| l.oracle_ratio.clone()).collect(),
        }
    }

    pub fn total_return(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// `t,reward,rolling_reward,cumulative_return,z*,oracle*,mode` rows.
    pub fn to_csv(&self) -> String {
        let dim = self.contexts.first().map_or(0, Vec::len);
        let mut out = String::from("t,reward,rolling_reward,cumulative_return");
        for i in 0..dim {
            out.push_str(&format!(",z{i}"));
        }
        for i in 0..dim {
            out.push_str(&format!(",oracle{i}"));
        }
        out.push_str(",mode\n");
        for t in 0..self.rewards.len() {
            out.push_str(&format!("{t},{},{},{}", self.rewards[t], self.rolling[t], self.cumulative[t]));
            for v in self.contexts[t].iter().chain(&self.oracle_ratios[t]) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.mode));
        }
        out
    }
}

/// One episode on any environment whose dynamics switch mid-episode.
pub fn switch_eval_env<E: Environment>(
    actor: &Actor,
    model: &EnsembleModel,
    env: &SwitchEnv<E>,
    horizon: usize,
    mode: AdaptMode,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<SwitchTrace> {
    if env.t_switch == 0 || env.t_switch >= horizon {
        return Err(Error::Config("switch step must lie strictly inside the episode".into()));
    }
    Ok(SwitchTrace::from_result(&adapt_rollout(actor, model, env, horizon, cfg, mode, rng)?))
}

#[allow(clippy::too_many_arguments)]
pub fn switch_eval(
    actor: &Actor,
    model: &EnsembleModel,
    kind: EnvKind,
    spec: &SwitchSpec,
    horizon: usize,
    mode: AdaptMode,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<SwitchTrace> {
    spec.validate(horizon)?;
    let env = SwitchEnv {
        before: Env::new(kind, spec.before.clone())?.with_horizon(horizon)?,
        after: Env::new(kind, spec.after.clone())?.with_horizon(horizon)?,
        t_switch: spec.t_switch,
    };
    switch_eval_env(actor, model, &env, horizon, mode, cfg, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSummary {
    pub mean: f64,
    /// Population std over seeds of the per-seed grid means.
    pub std: f64,
    pub mass_means: Vec<f64>,
    pub damping_means: Vec<f64>,
}

pub fn aggregate(r: &EvalGridResult) -> GridSummary {
    let seed_means = r.seed_means();
    let rows = r.means.len();
    let cols = r.dampings.len();
    let mass_means = r.means.iter().map(|row| mean(row)).collect();
    let damping_means = (0..cols)
        .map(|j| r.means.iter().map(|row| row[j]).sum::<f64>() / rows as f64)
        .collect();
    GridSummary {
        mean: mean(&seed_means),
        std: population_std(&seed_means),
        mass_means,
        damping_means,
    }
}

pub const SUMMARY_HEADER: &str = "config_name,mean,std,p_vs_baseline";

/// One summary row; `p` is empty for the baseline row itself or when the
/// test is undefined.
pub fn summary_row(name: &str, s: &GridSummary, p: Option<f64>) -> String {
    match p {
        Some(p) => format!("{name},{},{},{p}", s.mean, s.std),
        None => format!("{name},{},{},", s.mean, s.std),
    }
}
