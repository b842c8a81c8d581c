//! Soft actor-critic with a squashed Gaussian actor and twin critics.
//!
//! Policy and critic inputs are `s` followed by the context `z` when the
//! policy is context-conditioned (`ctx_dim == s_dim`), else `s` alone.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{clamp_log_std, softplus, AdamState, Activation, ForwardCache, Mlp};
use crate::rng::Rng;
use crate::types::ContextVector;

/// Pre-squash values are clamped to this magnitude.
pub const PRE_TANH_LIMIT: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            gamma: 0.99,
            alpha: 0.2,
            tau: 0.005,
            lr: 3e-4,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("sac.gamma {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("sac.alpha {} must be non-negative", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("sac.tau {} must lie in (0, 1]", self.tau)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("sac.lr {} must be non-negative", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("sac.hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Concatenate a state with an optional context.
pub fn policy_input(s: &[f64], z: Option<&[f64]>) -> Vec<f64> {
    let mut v = s.to_vec();
    if let Some(z) = z {
        v.extend_from_slice(z);
    }
    v
}

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[derive(Clone, Debug)]
pub struct Actor {
    net: Mlp,
    s_dim: usize,
    a_dim: usize,
    ctx_dim: usize,
    opt: AdamState,
}

/// Reparameterized sample of a batch of actions with everything needed to
/// differentiate through it.
pub struct ActorSample {
    pub actions: Array2<f64>,
    pub log_prob: Vec<f64>,
    cache: ForwardCache,
    noise: Array2<f64>,
    /// Whether the pre-squash clamp was inactive.
    inside: Array2<bool>,
}

impl Actor {
    pub fn new(s_dim: usize, a_dim: usize, ctx_dim: usize, hidden: &[usize], lr: f64, rng: &mut Rng) -> Result<Self> {
        if ctx_dim != 0 && ctx_dim != s_dim {
            return Err(Error::invalid(format!("context width {ctx_dim} must be 0 or {s_dim}")));
        }
        let mut sizes = vec![s_dim + ctx_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * a_dim);
        Self::from_net(Mlp::new(&sizes, Activation::Relu, rng)?, s_dim, a_dim, ctx_dim, lr)
    }

    /// A policy that ignores its input. Its deterministic action is `action`
    /// (each component in `(-1, 1)`); sampled actions use the minimum spread.
    pub fn constant(s_dim: usize, ctx_dim: usize, action: &[f64]) -> Result<Self> {
        if action.iter().any(|a| !(a.abs() < 1.0)) {
            return Err(Error::invalid("constant action must lie strictly inside (-1, 1)"));
        }
        let a_dim = action.len();
        let inp = s_dim + ctx_dim;
        let mut params = vec![0.0; inp * 2 * a_dim + 2 * a_dim];
        let bias = inp * 2 * a_dim;
        for (i, a) in action.iter().enumerate() {
            params[bias + i] = a.atanh();
            params[bias + a_dim + i] = -1e3;
        }
        Self::from_net(Mlp::from_params(&[inp, 2 * a_dim], Activation::Relu, params)?, s_dim, a_dim, ctx_dim, 0.0)
    }

    pub fn from_net(net: Mlp, s_dim: usize, a_dim: usize, ctx_dim: usize, lr: f64) -> Result<Self> {
        check_len("actor input", s_dim + ctx_dim, net.input_dim())?;
        check_len("actor output", 2 * a_dim, net.output_dim())?;
        let opt = AdamState::new(net.num_params(), lr);
        Ok(Self {
            net,
            s_dim,
            a_dim,
            ctx_dim,
            opt,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn s_dim(&self) -> usize {
        self.s_dim
    }

    pub fn a_dim(&self) -> usize {
        self.a_dim
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    pub fn input_dim(&self) -> usize {
        self.s_dim + self.ctx_dim
    }

    /// Check that a context is supplied exactly when the actor expects one.
    pub fn input(&self, s: &[f64], z: Option<&ContextVector>) -> Result<Vec<f64>> {
        check_len("state", self.s_dim, s.len())?;
        match (self.ctx_dim, z) {
            (0, None) => Ok(s.to_vec()),
            (0, Some(_)) => Err(Error::invalid("context given to an actor without context input")),
            (_, None) => Err(Error::invalid("context-conditioned actor needs a context")),
            (d, Some(z)) => {
                check_len("context", d, z.len())?;
                Ok(policy_input(s, Some(z.as_slice())))
            }
        }
    }

    pub fn act(&self, s: &[f64], z: Option<&ContextVector>, mode: ActMode, rng: &mut Rng) -> Result<Vec<f64>> {
        let x = self.input(s, z)?;
        let out = self.net.predict(&x)?;
        Ok((0..self.a_dim)
            .map(|j| {
                let mut u = out[j];
                if mode == ActMode::Stochastic {
                    u += clamp_log_std(out[self.a_dim + j]).0.exp() * rng.normal();
                }
                u.clamp(-PRE_TANH_LIMIT, PRE_TANH_LIMIT).tanh()
            })
            .collect())
    }

    /// Actions for a batch of inputs with caller-provided standard normal
    /// noise (`None` gives the deterministic action).
    pub fn act_batch(&self, inputs: Array2<f64>, noise: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let cache = self.net.forward_batch(inputs)?;
        let out = cache.output();
        let n = out.nrows();
        let mut a = Array2::zeros((n, self.a_dim));
        for r in 0..n {
            for j in 0..self.a_dim {
                let mut u = out[[r, j]];
                if let Some(eps) = noise {
                    u += clamp_log_std(out[[r, self.a_dim + j]]).0.exp() * eps[[r, j]];
                }
                a[[r, j]] = u.clamp(-PRE_TANH_LIMIT, PRE_TANH_LIMIT).tanh();
            }
        }
        Ok(a)
    }

    /// Draw actions and log-probabilities for a batch of inputs.
    pub fn sample(&self, inputs: Array2<f64>, rng: &mut Rng) -> Result<ActorSample> {
        let n = inputs.nrows();
        let noise = Array2::from_shape_simple_fn((n, self.a_dim), || rng.normal());
        let cache = self.net.forward_batch(inputs)?;
        let out = cache.output();
        let mut actions = Array2::zeros((n, self.a_dim));
        let mut inside = Array2::from_elem((n, self.a_dim), true);
        let mut log_prob = vec![0.0; n];
        for r in 0..n {
            for j in 0..self.a_dim {
                let ls = clamp_log_std(out[[r, self.a_dim + j]]).0;
                let eps = noise[[r, j]];
                let u = out[[r, j]] + ls.exp() * eps;
                let uc = u.clamp(-PRE_TANH_LIMIT, PRE_TANH_LIMIT);
                inside[[r, j]] = uc == u;
                actions[[r, j]] = uc.tanh();
                log_prob[r] += -ls - HALF_LN_2PI - 0.5 * eps * eps - log_one_minus_tanh_sq(uc);
            }
        }
        Ok(ActorSample {
            actions,
            log_prob,
            cache,
            noise,
            inside,
        })
    }
}

/// A differentiable action-value used to improve the actor.
pub trait ActionValue {
    /// Values and `dQ/da` for each row of `inputs` paired with `actions`.
    fn value_and_grad(&self, inputs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)>;
}

/// Loss `mean(alpha * log pi(a|x) - Q(x, a))` of a reparameterized sample and
/// its gradient with respect to the actor parameters.
fn actor_loss_grad(
    actor: &Actor,
    q: &impl ActionValue,
    inputs: &Array2<f64>,
    alpha: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::invalid("empty actor batch"));
    }
    let sample = actor.sample(inputs.clone(), rng)?;
    let (qv, dq) = q.value_and_grad(inputs.view(), sample.actions.view())?;
    let out = sample.cache.output();
    let ad = actor.a_dim;
    let b = n as f64;
    let mut d_out = Array2::zeros(out.dim());
    let mut loss = 0.0;
    for r in 0..n {
        loss += alpha * sample.log_prob[r] - qv[r];
        for j in 0..ad {
            let a = sample.actions[[r, j]];
            let (ls, dls) = clamp_log_std(out[[r, ad + j]]);
            let sigma_eps = ls.exp() * sample.noise[[r, j]];
            // d loss / d u through the squash; zero where the pre-squash clamp binds.
            let du = if sample.inside[[r, j]] {
                alpha * 2.0 * a - dq[[r, j]] * (1.0 - a * a)
            } else {
                0.0
            };
            d_out[[r, j]] = du / b;
            d_out[[r, ad + j]] = (-alpha + du * sigma_eps) * dls / b;
        }
    }
    let g = actor.net.backward(&sample.cache, d_out.view())?;
    Ok((loss / b, g.params))
}

/// One policy-improvement step; returns the loss before the step.
pub fn actor_update(
    actor: &mut Actor,
    q: &impl ActionValue,
    inputs: &Array2<f64>,
    alpha: f64,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (loss, g) = actor_loss_grad(actor, q, inputs, alpha, rng)?;
    actor.opt.lr = lr;
    actor.opt.step(actor.net.params_mut(), &g)?;
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct Critics {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub gamma: f64,
    pub alpha: f64,
    opt1: AdamState,
    opt2: AdamState,
}

/// One SAC minibatch. `inputs`/`next_inputs` are `s ++ z` and `s' ++ z'`.
#[derive(Clone, Debug)]
pub struct SacBatch {
    pub inputs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_inputs: Array2<f64>,
    pub dones: Vec<bool>,
}

impl SacBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn join(x: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[x, a]).expect("equal row counts")
}

fn q_values(net: &Mlp, xa: Array2<f64>) -> Result<(ForwardCache, Vec<f64>)> {
    let cache = net.forward_batch(xa)?;
    let v = cache.output().column(0).to_vec();
    Ok((cache, v))
}

impl Critics {
    pub fn new(input_dim: usize, a_dim: usize, cfg: &SacConfig, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![input_dim + a_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, Activation::Relu, rng)?;
        let q2 = Mlp::new(&sizes, Activation::Relu, rng)?;
        Self::from_nets(q1.clone(), q2.clone(), q1, q2, cfg.gamma, cfg.alpha, cfg.lr)
    }

    pub fn from_nets(q1: Mlp, q2: Mlp, q1_target: Mlp, q2_target: Mlp, gamma: f64, alpha: f64, lr: f64) -> Result<Self> {
        for m in [&q2, &q1_target, &q2_target] {
            if m.sizes() != q1.sizes() {
                return Err(Error::invalid("critic networks differ in shape"));
            }
        }
        check_len("critic output", 1, q1.output_dim())?;
        let (opt1, opt2) = (AdamState::new(q1.num_params(), lr), AdamState::new(q2.num_params(), lr));
        Ok(Self {
            q1,
            q2,
            q1_target,
            q2_target,
            gamma,
            alpha,
            opt1,
            opt2,
        })
    }

    /// Soft Bellman targets `r + gamma (1 - d) (min Q'(s', a') - alpha log pi(a'|s'))`.
    pub fn targets(&self, actor: &Actor, batch: &SacBatch, rng: &mut Rng) -> Result<Vec<f64>> {
        let next = actor.sample(batch.next_inputs.clone(), rng)?;
        let xa = join(batch.next_inputs.view(), next.actions.view());
        let (_, t1) = q_values(&self.q1_target, xa.clone())?;
        let (_, t2) = q_values(&self.q2_target, xa)?;
        Ok((0..batch.len())
            .map(|i| {
                if batch.dones[i] {
                    batch.rewards[i]
                } else {
                    let v = t1[i].min(t2[i]) - self.alpha * next.log_prob[i];
                    batch.rewards[i] + self.gamma * v
                }
            })
            .collect())
    }

    /// Regress both critics toward `targets`; returns the mean of the two
    /// mean squared residuals before the step.
    pub fn regress(&mut self, batch: &SacBatch, targets: &[f64], lr: f64) -> Result<f64> {
        check_len("critic targets", batch.len(), targets.len())?;
        let xa = join(batch.inputs.view(), batch.actions.view());
        let b = batch.len() as f64;
        let mut total = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.opt1), (&mut self.q2, &mut self.opt2)] {
            let (cache, q) = q_values(net, xa.clone())?;
            let mut d_out = Array2::zeros((batch.len(), 1));
            for i in 0..batch.len() {
                let e = q[i] - targets[i];
                total += e * e / b;
                d_out[[i, 0]] = 2.0 * e / b;
            }
            let g = net.backward(&cache, d_out.view())?;
            opt.lr = lr;
            opt.step(net.params_mut(), &g.params)?;
        }
        Ok(total / 2.0)
    }

    pub fn target_sync(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid(format!("tau {tau} must lie in (0, 1]")));
        }
        self.q1_target.polyak_from(&self.q1, tau)?;
        self.q2_target.polyak_from(&self.q2, tau)
    }
}

/// `min(q1, q2)` with the gradient of whichever critic is smaller.
impl ActionValue for Critics {
    fn value_and_grad(&self, inputs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let xa = join(inputs, actions);
        let in_dim = inputs.ncols();
        let n = xa.nrows();
        let ones = Array2::ones((n, 1));
        let (c1, v1) = q_values(&self.q1, xa.clone())?;
        let (c2, v2) = q_values(&self.q2, xa)?;
        let g1 = self.q1.backward(&c1, ones.view())?.input;
        let g2 = self.q2.backward(&c2, ones.view())?.input;
        let mut vals = Vec::with_capacity(n);
        let mut grad = Array2::zeros((n, actions.ncols()));
        for r in 0..n {
            let g = if v1[r] <= v2[r] { &g1 } else { &g2 };
            vals.push(v1[r].min(v2[r]));
            grad.row_mut(r).assign(&g.slice(s![r, in_dim..]));
        }
        Ok((vals, grad))
    }
}

/// One critic step: compute targets with the target networks, regress.
pub fn critic_update(c: &mut Critics, actor: &Actor, batch: &SacBatch, lr: f64, rng: &mut Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty critic batch"));
    }
    let y = c.targets(actor, batch, rng)?;
    c.regress(batch, &y, lr)
}

/// Serialized actor and critics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub s_dim: usize,
    pub a_dim: usize,
    pub ctx_dim: usize,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub gamma: f64,
    pub alpha: f64,
}

impl PolicyCheckpoint {
    pub fn capture(actor: &Actor, c: &Critics) -> Self {
        Self {
            s_dim: actor.s_dim,
            a_dim: actor.a_dim,
            ctx_dim: actor.ctx_dim,
            actor: actor.net.clone(),
            q1: c.q1.clone(),
            q2: c.q2.clone(),
            q1_target: c.q1_target.clone(),
            q2_target: c.q2_target.clone(),
            gamma: c.gamma,
            alpha: c.alpha,
        }
    }

    /// Rebuild the actor and critics with fresh optimizer state.
    pub fn restore(self, lr: f64) -> Result<(Actor, Critics)> {
        let actor = Actor::from_net(self.actor, self.s_dim, self.a_dim, self.ctx_dim, lr)?;
        let critics = Critics::from_nets(self.q1, self.q2, self.q1_target, self.q2_target, self.gamma, self.alpha, lr)?;
        check_len("critic input", actor.input_dim() + self.a_dim, critics.q1.input_dim())?;
        Ok((actor, critics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    struct Quadratic(f64);

    impl ActionValue for Quadratic {
        fn value_and_grad(&self, inputs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
            let _ = inputs;
            let v = actions.rows().into_iter().map(|r| -r.iter().map(|a| (a - self.0).powi(2)).sum::<f64>()).collect();
            Ok((v, actions.mapv(|a| -2.0 * (a - self.0))))
        }
    }

    struct Flat;

    impl ActionValue for Flat {
        fn value_and_grad(&self, _: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
            Ok((vec![1.0; actions.nrows()], Array2::zeros(actions.dim())))
        }
    }

    fn zero_actor(ctx: usize) -> Actor {
        let net = Mlp::zeros(&[2 + ctx, 8, 2], Activation::Relu).unwrap();
        Actor::from_net(net, 2, 1, ctx, 1e-3).unwrap()
    }

    #[test]
    fn constant_actor() {
        let actor = Actor::constant(2, 2, &[0.5, -0.25]).unwrap();
        let z = ContextVector::new(vec![0.9, 1.1]).unwrap();
        let a = actor.act(&[3.0, -1.0], Some(&z), ActMode::Deterministic, &mut Rng::new(0, 0)).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] + 0.25).abs() < 1e-12);
        assert!(Actor::constant(2, 0, &[1.0]).is_err());
    }

    #[test]
    fn zero_actor_acts_zero() {
        let a = zero_actor(0);
        let act = a.act(&[0.3, -0.2], None, ActMode::Deterministic, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(act, vec![0.0]);
    }

    #[test]
    fn context_presence_checked() {
        let a = zero_actor(2);
        let mut rng = Rng::new(0, 0);
        assert!(a.act(&[0.0, 0.0], None, ActMode::Deterministic, &mut rng).is_err());
        let z = ContextVector::ones(2);
        assert!(a.act(&[0.0, 0.0], Some(&z), ActMode::Deterministic, &mut rng).is_ok());
        assert!(zero_actor(0).act(&[0.0, 0.0], Some(&z), ActMode::Deterministic, &mut rng).is_err());
        assert!(Actor::new(2, 1, 1, &[4], 1e-3, &mut rng).is_err());
    }

    #[test]
    fn deterministic_repeatable_and_stochastic_in_range() {
        let mut rng = Rng::new(3, 0);
        let a = Actor::new(2, 1, 2, &[16], 1e-3, &mut rng).unwrap();
        let z = ContextVector::new(vec![1.2, 0.8]).unwrap();
        let d1 = a.act(&[0.5, 0.1], Some(&z), ActMode::Deterministic, &mut rng).unwrap();
        let d2 = a.act(&[0.5, 0.1], Some(&z), ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!(d1, d2);
        for _ in 0..10_000 {
            let x = a.act(&[50.0, -80.0], Some(&z), ActMode::Stochastic, &mut rng).unwrap();
            assert!(x[0] > -1.0 && x[0] < 1.0);
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let mut p = vec![0.0; 1 * 2 + 2];
        p[2] = 0.4; // mean bias
        p[3] = -0.7; // log-std bias
        let net = Mlp::from_params(&[1, 2], Activation::Relu, p).unwrap();
        let actor = Actor::from_net(net, 1, 1, 0, 0.0).unwrap();
        let s = actor.sample(Array2::zeros((1, 1)), &mut Rng::new(9, 0)).unwrap();
        let a = s.actions[[0, 0]];
        let u = a.atanh();
        let (ls, _) = clamp_log_std(-0.7);
        let sigma = ls.exp();
        let z = (u - 0.4) / sigma;
        let expected = -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - a * a).ln();
        assert!((s.log_prob[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn lr_zero_leaves_actor() {
        let mut rng = Rng::new(1, 0);
        let mut a = Actor::new(2, 1, 0, &[8], 0.0, &mut rng).unwrap();
        let before = a.net().clone();
        actor_update(&mut a, &Quadratic(0.3), &Array2::ones((4, 2)), 0.2, 0.0, &mut rng).unwrap();
        assert_eq!(a.net(), &before);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11, 0);
        let actor = Actor::new(2, 2, 0, &[6], 0.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.2);
        let q = Quadratic(0.3);
        let draw = Rng::new(12, 0);
        let (_, g) = actor_loss_grad(&actor, &q, &x, 0.2, &mut draw.clone()).unwrap();
        let h = 1e-6;
        for i in 0..actor.net.num_params() {
            let mut probe = actor.clone();
            probe.net.params_mut()[i] += h;
            let up = actor_loss_grad(&probe, &q, &x, 0.2, &mut draw.clone()).unwrap().0;
            probe.net.params_mut()[i] -= 2.0 * h;
            let down = actor_loss_grad(&probe, &q, &x, 0.2, &mut draw.clone()).unwrap().0;
            let num = (up - down) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-5 * num.abs().max(1.0), "param {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn actor_climbs_quadratic() {
        let mut rng = Rng::new(2, 0);
        let mut a = Actor::new(2, 1, 0, &[16], 1e-2, &mut rng).unwrap();
        let x = Array2::from_shape_fn((64, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        for _ in 0..3000 {
            actor_update(&mut a, &Quadratic(0.3), &x, 0.0, 1e-2, &mut rng).unwrap();
        }
        let act = a.act(&[0.1, -0.2], None, ActMode::Deterministic, &mut rng).unwrap();
        assert!((act[0] - 0.3).abs() < 0.05, "{act:?}");
    }

    /// Log-std maximizing the entropy of `tanh(N(0, sigma^2))`, found by
    /// numerical quadrature and bounded scalar search.
    const MAX_ENTROPY_LOG_STD: f64 = -0.134_218;

    #[test]
    fn flat_critic_raises_entropy() {
        // Linear actor with zero mean and a small initial log-std.
        let net = Mlp::from_params(&[2, 2], Activation::Relu, vec![0.0, 0.0, 0.0, 0.0, 0.0, -3.0]).unwrap();
        let mut a = Actor::from_net(net, 2, 1, 0, 1e-2).unwrap();
        let x = Array2::from_shape_fn((256, 2), |(i, j)| ((i * 5 + j) % 13) as f64 / 13.0 - 0.5);
        let mut rng = Rng::new(4, 0);
        let mean_ls = |a: &Actor| {
            let c = a.net().forward_batch(x.clone()).unwrap();
            c.output().column(1).iter().map(|v| clamp_log_std(*v).0).sum::<f64>() / x.nrows() as f64
        };
        let mut prev = mean_ls(&a);
        for _ in 0..10 {
            for _ in 0..20 {
                actor_update(&mut a, &Flat, &x, 0.2, 1e-2, &mut rng).unwrap();
            }
            let now = mean_ls(&a);
            assert!(now > prev, "{now} <= {prev}");
            prev = now;
        }
        for _ in 0..1000 {
            actor_update(&mut a, &Flat, &x, 0.2, 1e-2, &mut rng).unwrap();
        }
        assert!((mean_ls(&a) - MAX_ENTROPY_LOG_STD).abs() < 0.15, "{}", mean_ls(&a));
    }

    fn single_input_critics(gamma: f64, alpha: f64, lr: f64, rng: &mut Rng) -> Critics {
        let cfg = SacConfig {
            hidden: vec![16],
            gamma,
            alpha,
            tau: 1.0,
            lr,
        };
        Critics::new(2, 1, &cfg, rng).unwrap()
    }

    #[test]
    fn terminal_and_zero_discount_targets_are_rewards() {
        let mut rng = Rng::new(5, 0);
        let actor = Actor::new(2, 1, 0, &[8], 1e-3, &mut rng).unwrap();
        let c = single_input_critics(0.9, 0.2, 1e-3, &mut rng);
        let batch = SacBatch {
            inputs: Array2::zeros((3, 2)),
            actions: Array2::zeros((3, 1)),
            rewards: vec![1.0, -2.0, 0.5],
            next_inputs: Array2::from_elem((3, 2), 7.0),
            dones: vec![true; 3],
        };
        assert_eq!(c.targets(&actor, &batch, &mut rng).unwrap(), batch.rewards);
        let mut c0 = single_input_critics(0.9, 0.2, 1e-2, &mut rng);
        c0.gamma = 0.0;
        let open = SacBatch {
            inputs: Array2::from_shape_vec((3, 2), vec![0.0, 1.0, 1.0, 0.0, -1.0, 0.5]).unwrap(),
            dones: vec![false; 3],
            ..batch
        };
        assert_eq!(c0.targets(&actor, &open, &mut rng).unwrap(), open.rewards);
        let first = critic_update(&mut c0, &actor, &open, 1e-2, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = critic_update(&mut c0, &actor, &open, 1e-2, &mut rng).unwrap();
        }
        assert!(last < first * 0.1);
    }

    #[test]
    fn residual_mostly_non_increasing_on_frozen_targets() {
        let mut rng = Rng::new(6, 0);
        let actor = Actor::new(2, 1, 0, &[8], 1e-3, &mut rng).unwrap();
        let mut c = single_input_critics(0.9, 0.2, 1e-3, &mut rng);
        let n = 64;
        let batch = SacBatch {
            inputs: Array2::from_shape_fn((n, 2), |(i, j)| ((i + 3 * j) % 9) as f64 / 9.0),
            actions: Array2::from_shape_fn((n, 1), |(i, _)| (i % 5) as f64 / 5.0 - 0.4),
            rewards: (0..n).map(|i| (i % 4) as f64 * 0.5).collect(),
            next_inputs: Array2::from_shape_fn((n, 2), |(i, j)| ((i + j) % 7) as f64 / 7.0),
            dones: vec![false; n],
        };
        let y = c.targets(&actor, &batch, &mut rng).unwrap();
        let mut prev = f64::INFINITY;
        let mut violations = 0;
        for _ in 0..50 {
            let l = c.regress(&batch, &y, 1e-3).unwrap();
            if l > prev {
                violations += 1;
            }
            prev = l;
        }
        assert!(violations <= 5, "{violations}");
    }

    #[test]
    fn target_sync_arithmetic() {
        let mut rng = Rng::new(7, 0);
        let mut c = single_input_critics(0.9, 0.2, 1e-3, &mut rng);
        assert!(c.target_sync(0.0).is_err());
        assert!(c.target_sync(1.5).is_err());
        let sizes = c.q1.sizes().to_vec();
        let n = c.q1.num_params();
        c.q1 = Mlp::from_params(&sizes, Activation::Relu, vec![1.0; n]).unwrap();
        c.q1_target = Mlp::from_params(&sizes, Activation::Relu, vec![0.0; n]).unwrap();
        c.target_sync(0.5).unwrap();
        c.target_sync(0.5).unwrap();
        assert!(c.q1_target.params().iter().all(|&p| p == 0.75));
        c.target_sync(1.0).unwrap();
        assert_eq!(c.q1_target.params(), c.q1.params());
        assert_eq!(c.q2_target.params(), c.q2.params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(8, 0);
        let actor = Actor::new(2, 1, 2, &[8], 1e-3, &mut rng).unwrap();
        let critics = Critics::new(4, 1, &SacConfig::default(), &mut rng).unwrap();
        let ck = PolicyCheckpoint::capture(&actor, &critics);
        let text = serde_json::to_string(&ck).unwrap();
        let back: PolicyCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        let (a2, _) = back.restore(1e-3).unwrap();
        assert_eq!(a2.ctx_dim(), 2);
    }
}
