//! Zero-shot deployment with online context inference.
//!
//! During a test episode the adapter fits a linear model `f(s) ~ s' - s` on
//! the transitions seen so far (closed-form ridge, refit every step, last
//! `window` pairs). Once `k` steps have been collected the context is
//! `z = f(s) / delta_hat(s, a)`, where `delta_hat` is the world model's
//! predicted change for a candidate action drawn with the previous context.
//! The estimate is floored, clipped and optionally smoothed.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::env::{Env, EnvState};
use crate::error::{check_len, Error, Result};
use crate::rng::Rng;
use crate::sac::{ActMode, Actor};
use crate::types::ContextVector;
use crate::world_model::EnsembleModel;

/// Ridge regression of the state change on `(s, 1)`, one output at a time;
/// the intercept is not penalized.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDynModel {
    /// `w[i][j]`: weight of input `j` for output `i`.
    w: Vec<Vec<f64>>,
    c: Vec<f64>,
    ridge: f64,
    fitted: bool,
}

impl LinearDynModel {
    pub fn unfitted(dim: usize, ridge: f64) -> Self {
        Self {
            w: vec![vec![0.0; dim]; dim],
            c: vec![0.0; dim],
            ridge,
            fitted: false,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.c
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn predict(&self, s: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(Error::invalid("linear model used before fitting"));
        }
        check_len("linear model input", self.w[0].len(), s.len())?;
        Ok(self
            .w
            .iter()
            .zip(&self.c)
            .map(|(row, c)| c + row.iter().zip(s).map(|(w, x)| w * x).sum::<f64>())
            .collect())
    }

    /// The objective the fit minimizes: mean squared error plus
    /// `ridge * ||W||_F^2`.
    pub fn objective(&self, data: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
        let n = data.len() as f64;
        let mut mse = 0.0;
        for (s, d) in data {
            let p = self.predict(s)?;
            mse += p.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        }
        let reg: f64 = self.w.iter().flatten().map(|w| w * w).sum();
        Ok(mse + self.ridge * reg)
    }

    pub fn with_params(w: Vec<Vec<f64>>, c: Vec<f64>, ridge: f64) -> Self {
        Self {
            w,
            c,
            ridge,
            fitted: true,
        }
    }
}

/// Exact minimizer of `mean_t ||delta_t - W s_t - c||^2 + ridge ||W||_F^2`.
/// Fewer than two pairs give an unfitted model. Singular systems (e.g.
/// `ridge = 0` with collinear states) use the minimum-norm solution.
pub fn fit_linear(data: &[(Vec<f64>, Vec<f64>)], ridge: f64) -> Result<LinearDynModel> {
    if !(ridge >= 0.0) {
        return Err(Error::invalid("ridge coefficient must be non-negative"));
    }
    let Some((s0, d0)) = data.first() else {
        return Err(Error::invalid("fit_linear needs the state dimension; got no data"));
    };
    let (ds, dd) = (s0.len(), d0.len());
    if data.len() < 2 {
        return Ok(LinearDynModel {
            w: vec![vec![0.0; ds]; dd],
            c: vec![0.0; dd],
            ridge,
            fitted: false,
        });
    }
    for (s, d) in data {
        check_len("state", ds, s.len())?;
        check_len("delta", dd, d.len())?;
    }
    let n = data.len() as f64;
    let mut sm = vec![0.0; ds];
    let mut dm = vec![0.0; dd];
    for (s, d) in data {
        sm.iter_mut().zip(s).for_each(|(a, b)| *a += b / n);
        dm.iter_mut().zip(d).for_each(|(a, b)| *a += b / n);
    }
    let x = DMatrix::from_fn(data.len(), ds, |i, j| data[i].0[j] - sm[j]);
    let y = DMatrix::from_fn(data.len(), dd, |i, j| data[i].1[j] - dm[j]);
    let gram = x.transpose() * &x / n + DMatrix::identity(ds, ds) * ridge;
    let rhs = x.transpose() * &y / n;
    let sol = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::invalid(format!("ridge solve failed: {e}")))?;
    let w: Vec<Vec<f64>> = (0..dd).map(|i| (0..ds).map(|j| sol[(j, i)]).collect()).collect();
    let c = (0..dd)
        .map(|i| dm[i] - w[i].iter().zip(&sm).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    if w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("ridge solve produced non-finite weights"));
    }
    Ok(LinearDynModel {
        w,
        c,
        ridge,
        fitted: true,
    })
}

/// Coefficient of determination averaged over output dimensions with
/// nonzero variance.
pub fn r_squared(m: &LinearDynModel, data: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if !m.is_fitted() {
        return Err(Error::invalid("R^2 of an unfitted linear model"));
    }
    if data.len() < 2 {
        return Err(Error::invalid("R^2 needs at least two pairs"));
    }
    let preds = data.iter().map(|(s, _)| m.predict(s)).collect::<Result<Vec<_>>>()?;
    let dd = data[0].1.len();
    let n = data.len() as f64;
    let mut total = 0.0;
    let mut used = 0;
    for j in 0..dd {
        let mean = data.iter().map(|(_, d)| d[j]).sum::<f64>() / n;
        let sq: f64 = data.iter().map(|(_, d)| d[j] * d[j]).sum();
        let ss_tot: f64 = data.iter().map(|(_, d)| (d[j] - mean).powi(2)).sum();
        if ss_tot <= 1e-20 * sq || ss_tot == 0.0 {
            continue;
        }
        let ss_res: f64 = data.iter().zip(&preds).map(|((_, d), p)| (d[j] - p[j]).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("R^2 undefined: every output dimension is constant"));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    /// Steps collected before the learned context is used.
    pub k: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub delta_floor: f64,
    pub ema: f64,
    pub window: usize,
    pub ridge: f64,
    pub clip_oracle: bool,
    pub action_mode: ActMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: 50,
            clip_lo: 0.93,
            clip_hi: 1.07,
            delta_floor: 1e-3,
            ema: 0.0,
            window: 100,
            ridge: 1e-6,
            clip_oracle: true,
            action_mode: ActMode::Deterministic,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("adapt.k must be at least 1".into()));
        }
        if !(self.clip_lo > 0.0 && self.clip_lo <= 1.0 && self.clip_hi >= 1.0 && self.clip_hi.is_finite()) {
            return Err(Error::Config("adapt clip bounds must satisfy 0 < lo <= 1 <= hi".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config("adapt.ema must lie in [0, 1)".into()));
        }
        if !(self.delta_floor >= 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::Config("adapt.delta_floor and adapt.ridge must be non-negative".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("adapt.window must be at least 2".into()));
        }
        Ok(())
    }
}

/// Unclipped ratios must stay positive to form a context; a sign flip keeps
/// `prev` instead.
fn ratio_with_floor(num: &[f64], den: &[f64], floor: f64, prev: &[f64], clip: Option<(f64, f64)>) -> Vec<f64> {
    num.iter()
        .zip(den)
        .zip(prev)
        .map(|((n, d), p)| {
            let r = n / d;
            let z = if d.abs() >= floor && r.is_finite() { r } else { *p };
            match clip {
                Some((lo, hi)) => z.clamp(lo, hi),
                None if z > 0.0 => z,
                None => *p,
            }
        })
        .collect()
}

/// `z_i = delta_pred_i / delta_hat_i` (or `prev_i` where `|delta_hat_i|` is
/// below the floor), clipped to the bounds, then blended with `prev`.
pub fn estimate_context(delta_pred: &[f64], delta_hat: &[f64], cfg: &AdaptConfig, prev: &ContextVector) -> Result<ContextVector> {
    check_len("delta_hat", delta_pred.len(), delta_hat.len())?;
    check_len("previous context", delta_pred.len(), prev.len())?;
    let z = ratio_with_floor(delta_pred, delta_hat, cfg.delta_floor, prev.as_slice(), Some((cfg.clip_lo, cfg.clip_hi)));
    let z = z
        .iter()
        .zip(prev.as_slice())
        .map(|(z, p)| cfg.ema * p + (1.0 - cfg.ema) * z)
        .collect();
    ContextVector::new(z)
}

/// An episode the adapter can act in. `t` is the zero-based step index.
pub trait Environment {
    fn s_dim(&self) -> usize;
    fn a_dim(&self) -> usize;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// Next observation and reward.
    fn step(&self, t: usize, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)>;
}

impl Environment for Env {
    fn s_dim(&self) -> usize {
        Env::s_dim(self)
    }

    fn a_dim(&self) -> usize {
        Env::a_dim(self)
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        Env::reset(self, rng).observation
    }

    fn step(&self, t: usize, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
        let state = EnvState {
            observation: s.to_vec(),
            step_count: t,
        };
        let out = Env::step(self, &state, a)?;
        Ok((out.state.observation, out.reward))
    }
}

/// Dynamics that change from `before` to `after` at step `t_switch`.
#[derive(Clone, Debug)]
pub struct SwitchEnv<E> {
    pub before: E,
    pub after: E,
    pub t_switch: usize,
}

impl<E: Environment> Environment for SwitchEnv<E> {
    fn s_dim(&self) -> usize {
        self.before.s_dim()
    }

    fn a_dim(&self) -> usize {
        self.before.a_dim()
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        self.before.reset(rng)
    }

    fn step(&self, t: usize, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
        if t < self.t_switch {
            self.before.step(t, s, a)
        } else {
            self.after.step(t, s, a)
        }
    }
}

/// An environment whose true state change is `scale * delta_hat(s, a)`, the
/// world model's mean prediction rescaled per dimension. The reward is
/// `-||s'||^2`. The exact context of this environment is `scale`.
#[derive(Clone, Debug)]
pub struct ScaledModelEnv {
    pub model: EnsembleModel,
    pub scale: Vec<f64>,
    pub reset_lo: Vec<f64>,
    pub reset_hi: Vec<f64>,
}

impl Environment for ScaledModelEnv {
    fn s_dim(&self) -> usize {
        self.model.s_dim()
    }

    fn a_dim(&self) -> usize {
        self.model.a_dim()
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        self.reset_lo
            .iter()
            .zip(&self.reset_hi)
            .map(|(lo, hi)| rng.uniform_in(*lo, *hi))
            .collect()
    }

    fn step(&self, _t: usize, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
        let d = self.model.mean_delta(s, a)?;
        let next: Vec<f64> = s.iter().zip(&d).zip(&self.scale).map(|((s, d), c)| s + c * d).collect();
        let reward = -next.iter().map(|x| x * x).sum::<f64>();
        Ok((next, reward))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdaptMode {
    Learned,
    Default,
    Oracle,
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::Learned => "learned",
            AdaptMode::Default => "default",
            AdaptMode::Oracle => "oracle",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(AdaptMode::Learned),
            "default" => Ok(AdaptMode::Default),
            "oracle" => Ok(AdaptMode::Oracle),
            other => Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub t: usize,
    pub reward: f64,
    /// Context the action at step `t` was chosen with.
    pub context: Vec<f64>,
    /// In-sample R^2 of the linear model after this step's refit.
    pub r2: Option<f64>,
    /// `delta* / delta_hat` at this step's state and action, floored and
    /// clipped like the oracle context.
    pub oracle_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    pub total_return: f64,
    pub mode: AdaptMode,
    pub log: Vec<StepLog>,
}

pub const STEP_LOG_HEADER_PREFIX: &str = "t,reward";

impl AdaptResult {
    /// CSV with header `t,reward,z0..,r2,mode`.
    pub fn to_csv(&self) -> String {
        let dim = self.log.first().map_or(0, |l| l.context.len());
        let mut out = String::from(STEP_LOG_HEADER_PREFIX);
        for i in 0..dim {
            out.push_str(&format!(",z{i}"));
        }
        out.push_str(",r2,mode\n");
        for l in &self.log {
            out.push_str(&format!("{},{}", l.t, l.reward));
            for z in &l.context {
                out.push_str(&format!(",{z}"));
            }
            match l.r2 {
                Some(r) => out.push_str(&format!(",{r}")),
                None => out.push(','),
            }
            out.push_str(&format!(",{}\n", self.mode));
        }
        out
    }
}

fn act(actor: &Actor, s: &[f64], z: &ContextVector, mode: ActMode, rng: &mut Rng) -> Result<Vec<f64>> {
    let ctx = (actor.ctx_dim() > 0).then_some(z);
    actor.act(s, ctx, mode, rng)
}

/// One test episode of `horizon` steps. Rewards are accumulated for
/// reporting only; the context never depends on them.
pub fn adapt_rollout<E: Environment>(
    actor: &Actor,
    model: &EnsembleModel,
    env: &E,
    horizon: usize,
    cfg: &AdaptConfig,
    mode: AdaptMode,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    cfg.validate()?;
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if actor.ctx_dim() == 0 && mode != AdaptMode::Default {
        return Err(Error::invalid(format!("{mode} context needs a context-conditioned actor")));
    }
    let s_dim = env.s_dim();
    check_len("actor state", s_dim, actor.s_dim())?;
    check_len("model state", s_dim, model.s_dim())?;
    let clip = cfg.clip_oracle.then_some((cfg.clip_lo, cfg.clip_hi));

    let mut s = env.reset(rng);
    let mut z = ContextVector::ones(s_dim);
    let mut oracle_prev = vec![1.0; s_dim];
    let mut data: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(cfg.window);
    let mut log = Vec::with_capacity(horizon);
    let mut total = 0.0;

    for t in 0..horizon {
        let a = act(actor, &s, &z, cfg.action_mode, rng)?;
        let (next, reward) = env.step(t, &s, &a)?;
        total += reward;
        let delta: Vec<f64> = next.iter().zip(&s).map(|(n, s)| n - s).collect();

        let delta_hat_exec = model.mean_delta(&s, &a)?;
        let oracle = ratio_with_floor(&delta, &delta_hat_exec, cfg.delta_floor, &oracle_prev, clip);

        if data.len() == cfg.window {
            data.pop_front();
        }
        data.push_back((s.clone(), delta));
        let pairs = data.make_contiguous();
        let f = fit_linear(pairs, cfg.ridge)?;
        let r2 = if f.is_fitted() { r_squared(&f, pairs).ok() } else { None };

        log.push(StepLog {
            t,
            reward,
            context: z.as_slice().to_vec(),
            r2,
            oracle_ratio: oracle.clone(),
        });

        z = match mode {
            AdaptMode::Default => z,
            AdaptMode::Oracle => ContextVector::new(oracle.clone())?,
            AdaptMode::Learned if t + 1 >= cfg.k && f.is_fitted() => {
                let a_cand = act(actor, &next, &z, cfg.action_mode, rng)?;
                let delta_pred = f.predict(&next)?;
                let delta_hat = model.mean_delta(&next, &a_cand)?;
                estimate_context(&delta_pred, &delta_hat, cfg, &z)?
            }
            AdaptMode::Learned => z,
        };
        oracle_prev = oracle;
        s = next;
    }
    Ok(AdaptResult {
        total_return: total,
        mode,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn pairs(v: &[(f64, f64)]) -> Vec<(Vec<f64>, Vec<f64>)> {
        v.iter().map(|(s, d)| (vec![*s], vec![*d])).collect()
    }

    #[test]
    fn exact_interpolation() {
        let m = fit_linear(&pairs(&[(1.0, 2.0), (2.0, 4.0)]), 0.0).unwrap();
        assert!((m.weights()[0][0] - 2.0).abs() < 1e-12);
        assert!(m.bias()[0].abs() < 1e-12);
    }

    #[test]
    fn constant_target() {
        let m = fit_linear(&pairs(&[(1.0, 0.3), (2.0, 0.3), (-4.0, 0.3)]), 1e-6).unwrap();
        assert!(m.weights()[0][0].abs() < 1e-9);
        assert!((m.bias()[0] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn too_few_pairs_unfitted() {
        let m = fit_linear(&pairs(&[(1.0, 2.0)]), 0.0).unwrap();
        assert!(!m.is_fitted());
        assert!(m.predict(&[1.0]).is_err());
        assert!(r_squared(&m, &pairs(&[(1.0, 2.0), (2.0, 3.0)])).is_err());
    }

    #[test]
    fn recovers_noisy_affine_map() {
        let mut rng = Rng::new(3, 0);
        let a = [[0.5, -0.2], [0.1, 0.3]];
        let b = [0.05, -0.1];
        let data: Vec<_> = (0..500)
            .map(|_| {
                let s = vec![rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
                let d = (0..2)
                    .map(|i| a[i][0] * s[0] + a[i][1] * s[1] + b[i] + 0.01 * rng.normal())
                    .collect();
                (s, d)
            })
            .collect();
        let m = fit_linear(&data, 1e-6).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.weights()[i][j] - a[i][j]).abs() < 0.05);
            }
        }
        assert!(r_squared(&m, &data).unwrap() > 0.99);
    }

    #[test]
    fn r_squared_reference_points() {
        let data = pairs(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]);
        let perfect = fit_linear(&data, 0.0).unwrap();
        assert!((r_squared(&perfect, &data).unwrap() - 1.0).abs() < 1e-12);
        let mean_only = LinearDynModel::with_params(vec![vec![0.0]], vec![3.0], 0.0);
        assert!(r_squared(&mean_only, &data).unwrap().abs() < 1e-12);
    }

    #[test]
    fn r_squared_skips_constant_dimensions() {
        let data: Vec<_> = (0..5).map(|i| (vec![i as f64], vec![2.0 * i as f64, 0.7])).collect();
        let m = fit_linear(&data, 0.0).unwrap();
        assert!((r_squared(&m, &data).unwrap() - 1.0).abs() < 1e-9);
        let flat: Vec<_> = (0..5).map(|i| (vec![i as f64], vec![0.7])).collect();
        let m = fit_linear(&flat, 0.0).unwrap();
        assert!(r_squared(&m, &flat).is_err());
    }

    #[test]
    fn context_ratio_clip_and_floor() {
        let cfg = AdaptConfig::default();
        let prev = ContextVector::new(vec![1.01, 0.98]).unwrap();
        let z = estimate_context(&[0.2, -0.4], &[0.1, -0.2], &cfg, &prev).unwrap();
        assert_eq!(z.as_slice(), &[1.07, 1.07]);
        let z = estimate_context(&[0.3, 0.5], &[0.3, 0.5], &cfg, &prev).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 1.0]);
        let z = estimate_context(&[0.3, 0.5], &[0.3, 1e-4], &cfg, &prev).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.98]);
        let smooth = AdaptConfig { ema: 0.5, ..cfg };
        let z = estimate_context(&[0.2, 0.2], &[0.2, 0.2], &smooth, &ContextVector::new(vec![0.94, 1.06]).unwrap()).unwrap();
        assert!((z.as_slice()[0] - 0.97).abs() < 1e-12 && (z.as_slice()[1] - 1.03).abs() < 1e-12);
    }

    #[test]
    fn unclipped_sign_flip_keeps_previous() {
        let z = ratio_with_floor(&[-0.2, 0.3], &[0.1, 0.1], 1e-3, &[1.02, 1.0], None);
        assert_eq!(z, vec![1.02, 0.3 / 0.1]);
    }

    #[test]
    fn invalid_adapt_config() {
        for cfg in [
            AdaptConfig { k: 0, ..Default::default() },
            AdaptConfig { clip_lo: 1.1, ..Default::default() },
            AdaptConfig { ema: 1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn identity_ratio_is_ones(d in proptest::collection::vec(-5.0f64..5.0, 3), lo in 0.5f64..1.0, hi in 1.0f64..2.0) {
            let cfg = AdaptConfig { clip_lo: lo, clip_hi: hi, delta_floor: 0.0, ..Default::default() };
            let d: Vec<f64> = d.into_iter().map(|x| if x == 0.0 { 1.0 } else { x }).collect();
            let z = estimate_context(&d, &d, &cfg, &ContextVector::ones(3)).unwrap();
            prop_assert!(z.as_slice().iter().all(|&v| v == 1.0));
        }

        #[test]
        fn ridge_fit_beats_perturbations(seed in 0u64..1000, ridge in 0.0f64..0.1) {
            let mut rng = Rng::new(seed, 1);
            let data: Vec<_> = (0..30)
                .map(|_| {
                    let s = vec![rng.normal(), rng.normal()];
                    let d = vec![0.3 * s[0] - s[1] + rng.normal(), 0.2 + 0.1 * rng.normal()];
                    (s, d)
                })
                .collect();
            let m = fit_linear(&data, ridge).unwrap();
            let best = m.objective(&data).unwrap();
            for _ in 0..100 {
                let w = m.weights().iter().map(|r| r.iter().map(|v| v + 0.05 * rng.normal()).collect()).collect();
                let c = m.bias().iter().map(|v| v + 0.05 * rng.normal()).collect();
                let p = LinearDynModel::with_params(w, c, ridge);
                prop_assert!(best <= p.objective(&data).unwrap() + 1e-12);
            }
        }
    }
}
