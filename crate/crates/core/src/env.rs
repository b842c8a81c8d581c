//! Parametric continuous-control environments.
//!
//! Three small systems share one template: a second-order body driven by a
//! bounded actuator, integrated with semi-implicit Euler (velocity first).
//! [`DynamicsParams`] varies the body mass and the damping coefficient by
//! multiplicative factors, disables actuators, or rescales the observation
//! per dimension. The data-collection environment uses nominal params; test
//! environments use anything else.
//!
//! | kind              | state                    | action     | goal            |
//! |-------------------|--------------------------|------------|-----------------|
//! | MassSpringDamper  | (x, v)                   | force      | x = 1.0         |
//! | PointMass2D       | (x, y, vx, vy)           | (fx, fy)   | (x, y) = (1, 1) |
//! | DampedPendulum    | (theta, theta_dot)       | torque     | theta = 0.4     |
//!
//! Every reset draws each observation component uniformly from
//! `[-0.1, 0.1]` (before `dim_scale`). Episodes end only at the horizon.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;
use crate::types::{Dataset, Transition};

pub const DT: f64 = 0.05;
pub const FORCE: f64 = 1.0;
pub const BASE_MASS: f64 = 1.0;
pub const BASE_DAMPING: f64 = 0.1;
pub const SPRING: f64 = 0.5;
pub const GRAVITY: f64 = 2.0;
pub const ACTION_COST: f64 = 0.01;
pub const RESET_HALF_WIDTH: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 200;
/// Proportional gain of the scripted behaviour controller.
pub const CONTROLLER_GAIN: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    MassSpringDamper,
    PointMass2D,
    DampedPendulum,
}

impl EnvKind {
    pub fn s_dim(self) -> usize {
        match self {
            EnvKind::MassSpringDamper | EnvKind::DampedPendulum => 2,
            EnvKind::PointMass2D => 4,
        }
    }

    pub fn a_dim(self) -> usize {
        match self {
            EnvKind::MassSpringDamper | EnvKind::DampedPendulum => 1,
            EnvKind::PointMass2D => 2,
        }
    }

    /// Number of position coordinates; the state is `(positions, velocities)`.
    fn n_pos(self) -> usize {
        self.a_dim()
    }

    fn goal(self) -> &'static [f64] {
        match self {
            EnvKind::MassSpringDamper => &[1.0],
            EnvKind::PointMass2D => &[1.0, 1.0],
            EnvKind::DampedPendulum => &[0.4],
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            EnvKind::MassSpringDamper => "msd",
            EnvKind::PointMass2D => "pm2d",
            EnvKind::DampedPendulum => "pendulum",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msd" | "mass_spring_damper" | "massspringdamper" => Ok(EnvKind::MassSpringDamper),
            "pm2d" | "point_mass_2d" | "pointmass2d" => Ok(EnvKind::PointMass2D),
            "pendulum" | "damped_pendulum" | "dampedpendulum" => Ok(EnvKind::DampedPendulum),
            other => Err(Error::Config(format!("unknown env kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub mass_scale: f64,
    pub damping_scale: f64,
    pub actuator_mask: Vec<bool>,
    pub dim_scale: Vec<f64>,
}

impl DynamicsParams {
    pub fn nominal(kind: EnvKind) -> Self {
        Self {
            mass_scale: 1.0,
            damping_scale: 1.0,
            actuator_mask: vec![true; kind.a_dim()],
            dim_scale: vec![1.0; kind.s_dim()],
        }
    }

    pub fn with_mass_damping(kind: EnvKind, mass_scale: f64, damping_scale: f64) -> Self {
        Self {
            mass_scale,
            damping_scale,
            ..Self::nominal(kind)
        }
    }

    pub fn validate(&self, kind: EnvKind) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.mass_scale) || !positive(self.damping_scale) {
            return Err(Error::Config("mass_scale and damping_scale must be positive".into()));
        }
        check_len("actuator_mask", kind.a_dim(), self.actuator_mask.len())?;
        check_len("dim_scale", kind.s_dim(), self.dim_scale.len())?;
        if !self.dim_scale.iter().all(|&x| positive(x)) {
            return Err(Error::Config("dim_scale components must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// An environment instance: kind, dynamics variant and episode horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    kind: EnvKind,
    params: DynamicsParams,
    horizon: usize,
}

impl Env {
    pub fn new(kind: EnvKind, params: DynamicsParams) -> Result<Self> {
        params.validate(kind)?;
        Ok(Self {
            kind,
            params,
            horizon: DEFAULT_HORIZON,
        })
    }

    pub fn nominal(kind: EnvKind) -> Self {
        Self {
            kind,
            params: DynamicsParams::nominal(kind),
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn params(&self) -> &DynamicsParams {
        &self.params
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn s_dim(&self) -> usize {
        self.kind.s_dim()
    }

    pub fn a_dim(&self) -> usize {
        self.kind.a_dim()
    }

    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        let observation = self
            .params
            .dim_scale
            .iter()
            .map(|d| d * rng.uniform_in(-RESET_HALF_WIDTH, RESET_HALF_WIDTH))
            .collect();
        EnvState {
            observation,
            step_count: 0,
        }
    }

    pub fn step(&self, s: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        check_len("action", self.a_dim(), action.len())?;
        check_len("observation", self.s_dim(), s.observation.len())?;
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::invalid(format!("action {action:?} outside [-1, 1]")));
        }
        if s.step_count >= self.horizon {
            return Err(Error::invalid("step called after episode end"));
        }
        let p = &self.params;
        let n = self.kind.n_pos();
        let phys: Vec<f64> = s
            .observation
            .iter()
            .zip(&p.dim_scale)
            .map(|(o, d)| o / d)
            .collect();
        let (pos, vel) = phys.split_at(n);
        let mass = BASE_MASS * p.mass_scale;
        let damping = BASE_DAMPING * p.damping_scale;
        let mut next = vec![0.0; 2 * n];
        for i in 0..n {
            let u = if p.actuator_mask[i] { action[i] } else { 0.0 };
            let restoring = match self.kind {
                EnvKind::DampedPendulum => GRAVITY * pos[i].sin(),
                _ => SPRING * pos[i],
            };
            let v = vel[i] + DT * (FORCE * u / mass - damping * vel[i] - restoring);
            next[n + i] = v;
            next[i] = pos[i] + DT * v;
        }
        let goal = self.kind.goal();
        let dist: f64 = (0..n).map(|i| (next[i] - goal[i]).powi(2)).sum();
        let effort: f64 = action.iter().map(|a| a * a).sum();
        let reward = -dist - ACTION_COST * effort;
        let observation = next.iter().zip(&p.dim_scale).map(|(x, d)| x * d).collect();
        let step_count = s.step_count + 1;
        Ok(StepOutcome {
            state: EnvState {
                observation,
                step_count,
            },
            reward,
            done: step_count == self.horizon,
        })
    }

    /// Scripted behaviour policy: proportional pull of each position toward
    /// its goal, saturated to the action box.
    pub fn controller_action(&self, observation: &[f64]) -> Vec<f64> {
        let goal = self.kind.goal();
        (0..self.kind.n_pos())
            .map(|i| {
                let pos = observation[i] / self.params.dim_scale[i];
                (CONTROLLER_GAIN * (goal[i] - pos)).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

/// Behaviour-policy mixture for dataset collection. Each step independently
/// uses a uniform random action with probability `random_frac`, otherwise
/// the scripted controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMix {
    pub random_frac: f64,
    pub mediocre_frac: f64,
}

impl PolicyMix {
    pub fn validate(&self) -> Result<()> {
        let ok = self.random_frac >= 0.0
            && self.mediocre_frac >= 0.0
            && ((self.random_frac + self.mediocre_frac) - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(Error::Config(format!(
                "policy fractions must be non-negative and sum to 1 (random {} + mediocre {} = {})",
                self.random_frac,
                self.mediocre_frac,
                self.random_frac + self.mediocre_frac
            )));
        }
        Ok(())
    }
}

pub fn generate_offline_dataset(
    env: &Env,
    mix: PolicyMix,
    n_transitions: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    mix.validate()?;
    if n_transitions == 0 {
        return Err(Error::invalid("n_transitions must be positive"));
    }
    let mut data = Dataset::new(env.s_dim(), env.a_dim())?;
    let mut state = env.reset(rng);
    for _ in 0..n_transitions {
        let action: Vec<f64> = if rng.bernoulli(mix.random_frac) {
            (0..env.a_dim()).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
        } else {
            env.controller_action(&state.observation)
        };
        let out = env.step(&state, &action)?;
        data.push(Transition {
            state: state.observation.clone(),
            action,
            reward: out.reward,
            next_state: out.state.observation.clone(),
            done: out.done,
        })?;
        state = if out.done { env.reset(rng) } else { out.state };
    }
    Ok(data)
}

/// Undiscounted per-episode returns of a dataset, split at `done` flags.
/// A trailing partial episode is included.
pub fn episode_returns(d: &Dataset) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut open = false;
    for t in d.transitions() {
        acc += t.reward;
        open = true;
        if t.done {
            out.push(acc);
            acc = 0.0;
            open = false;
        }
    }
    if open {
        out.push(acc);
    }
    out
}
