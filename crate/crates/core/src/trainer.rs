//! Policy training inside the learned model.
//!
//! One run fits the ensemble once, then repeats per epoch: branch `B`
//! short rollouts of length `h` from dataset states under the current actor
//! with penalized model rewards, then take `G` SAC steps on batches mixing
//! real and model transitions. Every sampled tuple gets a fresh `z` and is
//! augmented on the fly; stored transitions are never augmented.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, sample_z, AugKind, AugRange};
use crate::error::{Error, Result};
use crate::sac::{actor_update, critic_update, Actor, Critics, SacBatch, SacConfig};
use crate::types::{ContextVector, Dataset, Transition};
use crate::world_model::{penalized_reward, train_ensemble, EnsembleConfig, EnsembleModel, TrainReport};
use crate::Rng;

/// Epoch count used when a config leaves it unset: baseline and augmented
/// runs keep a 4:9 ratio.
pub const BASELINE_EPOCHS: usize = 100;
pub const AUGMENTED_EPOCHS: usize = 225;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub h: usize,
    pub lambda: f64,
    pub rollout_batch: usize,
    /// `None` picks [`BASELINE_EPOCHS`] without augmentation and
    /// [`AUGMENTED_EPOCHS`] with it.
    pub epochs: Option<usize>,
    pub real_data_frac: f64,
    pub aug: AugKind,
    pub range: AugRange,
    pub use_context: bool,
    pub grad_steps: usize,
    pub sac_batch: usize,
    pub buffer_capacity: usize,
    pub sac: SacConfig,
    pub model: EnsembleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            h: 5,
            lambda: 1.0,
            rollout_batch: 256,
            epochs: None,
            real_data_frac: 0.05,
            aug: AugKind::Das,
            range: AugRange::default(),
            use_context: true,
            grad_steps: 10,
            sac_batch: 256,
            buffer_capacity: 200_000,
            sac: SacConfig::default(),
            model: EnsembleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.aug {
            AugKind::None => BASELINE_EPOCHS,
            _ => AUGMENTED_EPOCHS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::Config("rollout horizon h must be at least 1".into()));
        }
        if self.rollout_batch == 0 {
            return Err(Error::Config("rollout batch B must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.real_data_frac) {
            return Err(Error::Config("real_data_frac must lie in [0, 1]".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.sac_batch == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("sac batch and buffer capacity must be positive".into()));
        }
        self.sac.validate()?;
        self.model.validate()
    }
}

/// Fixed-capacity FIFO of model transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slot `i` in storage order (not insertion order once wrapped).
    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Contents from oldest to newest.
    pub fn ordered(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(&self.items[..split])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RolloutStats {
    pub added: usize,
    pub nonfinite_branches: usize,
    /// Mean over branches of the summed penalized reward.
    pub mean_return: f64,
}

fn context_input(s: &[f64], z: Option<&[f64]>) -> Vec<f64> {
    crate::sac::policy_input(s, z)
}

/// Branch `cfg.rollout_batch` rollouts of `cfg.h` steps in the model.
/// Rollout `b` draws everything from `rng.derive(b)`, so results do not
/// depend on evaluation order.
pub fn rollout_batch(
    model: &EnsembleModel,
    actor: &Actor,
    d_env: &Dataset,
    cfg: &TrainConfig,
    buf: &mut ReplayBuffer,
    rng: &Rng,
) -> Result<RolloutStats> {
    if !model.is_fitted() {
        return Err(Error::invalid("rollouts need a trained model"));
    }
    if d_env.is_empty() {
        return Err(Error::invalid("rollouts need a non-empty dataset"));
    }
    let (s_dim, a_dim) = (model.s_dim(), model.a_dim());
    let ones = vec![1.0; s_dim];
    let ctx = (actor.ctx_dim() > 0).then_some(ones.as_slice());
    let b_total = cfg.rollout_batch;
    let mut rngs: Vec<Rng> = (0..b_total).map(|b| rng.derive(b as u64)).collect();
    let mut states: Vec<Option<Vec<f64>>> = rngs
        .iter_mut()
        .map(|r| Some(d_env.get(r.index(d_env.len())).state.clone()))
        .collect();
    let mut returns = vec![0.0; b_total];
    let mut stats = RolloutStats::default();

    for _ in 0..cfg.h {
        let live: Vec<usize> = (0..b_total).filter(|&b| states[b].is_some()).collect();
        if live.is_empty() {
            break;
        }
        let n = live.len();
        let mut inputs = Array2::zeros((n, actor.input_dim()));
        let mut noise = Array2::zeros((n, a_dim));
        for (r, &b) in live.iter().enumerate() {
            let x = context_input(states[b].as_ref().expect("live"), ctx);
            for (j, v) in x.into_iter().enumerate() {
                inputs[[r, j]] = v;
            }
            for j in 0..a_dim {
                noise[[r, j]] = rngs[b].normal();
            }
        }
        let actions = actor.act_batch(inputs, Some(&noise))?;
        let mut sa = Array2::zeros((n, s_dim + a_dim));
        for (r, &b) in live.iter().enumerate() {
            let s = states[b].as_ref().expect("live");
            for j in 0..s_dim {
                sa[[r, j]] = s[j];
            }
            for j in 0..a_dim {
                sa[[r, s_dim + j]] = actions[[r, j]];
            }
        }
        let out = model.forward_members(&sa)?;
        let u = model.uncertainty_rows(&out);
        for (r, &b) in live.iter().enumerate() {
            let rg = &mut rngs[b];
            let m = rg.index(model.n());
            let s = states[b].take().expect("live");
            let next: Vec<f64> = (0..s_dim)
                .map(|j| s[j] + out.means[m][[r, j]] + out.stds[m][[r, j]] * rg.normal())
                .collect();
            let raw_r = out.means[m][[r, s_dim]] + out.stds[m][[r, s_dim]] * rg.normal();
            let action = actions.row(r).to_vec();
            let finite = next.iter().all(|v| v.is_finite()) && raw_r.is_finite() && u[r].is_finite();
            if !finite {
                stats.nonfinite_branches += 1;
                continue;
            }
            let reward = penalized_reward(raw_r, u[r], cfg.lambda)?;
            returns[b] += reward;
            buf.push(Transition {
                state: s,
                action,
                reward,
                next_state: next.clone(),
                done: false,
            });
            stats.added += 1;
            states[b] = Some(next);
        }
    }
    stats.mean_return = returns.iter().sum::<f64>() / b_total as f64;
    Ok(stats)
}

/// Draw one SAC batch: a `real_data_frac` share from the dataset, the rest
/// from the buffer (or all from the dataset while the buffer is empty). Each
/// tuple is augmented with its own `z`.
pub fn sample_batch(
    d_env: &Dataset,
    buf: &ReplayBuffer,
    cfg: &TrainConfig,
    ctx_dim: usize,
    rng: &mut Rng,
) -> Result<SacBatch> {
    let n = cfg.sac_batch;
    let n_real = if buf.is_empty() {
        n
    } else {
        (cfg.real_data_frac * n as f64).round() as usize
    };
    let (s_dim, a_dim) = (d_env.s_dim(), d_env.a_dim());
    let width = s_dim + ctx_dim;
    let mut batch = SacBatch {
        inputs: Array2::zeros((n, width)),
        actions: Array2::zeros((n, a_dim)),
        rewards: Vec::with_capacity(n),
        next_inputs: Array2::zeros((n, width)),
        dones: Vec::with_capacity(n),
    };
    for i in 0..n {
        let t = if i < n_real {
            d_env.get(rng.index(d_env.len()))
        } else {
            buf.get(rng.index(buf.len()))
        };
        let (t, z) = match cfg.aug {
            AugKind::None => (t.clone(), ContextVector::ones(s_dim)),
            kind => {
                let z = sample_z(cfg.range, s_dim, rng);
                (apply(kind, &z, t)?, z)
            }
        };
        let ctx = (ctx_dim > 0).then_some(z.as_slice());
        for (j, v) in context_input(&t.state, ctx).into_iter().enumerate() {
            batch.inputs[[i, j]] = v;
        }
        for (j, v) in context_input(&t.next_state, ctx).into_iter().enumerate() {
            batch.next_inputs[[i, j]] = v;
        }
        for j in 0..a_dim {
            batch.actions[[i, j]] = t.action[j];
        }
        batch.rewards.push(t.reward);
        batch.dones.push(t.done);
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_model_return: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub buffer_size: usize,
    pub nonfinite_branches: usize,
}

pub const METRICS_HEADER: &str = "epoch,mean_model_return,critic_loss,actor_loss,buffer_size,nonfinite_branches";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.mean_model_return, self.critic_loss, self.actor_loss, self.buffer_size, self.nonfinite_branches
        )
    }
}

pub struct TrainOutput {
    pub actor: Actor,
    pub critics: Critics,
    pub model: EnsembleModel,
    pub model_report: Option<TrainReport>,
    pub metrics: Vec<EpochMetrics>,
}

const MODEL_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const ROLLOUT_STREAM: u64 = 3;
const SAC_STREAM: u64 = 4;

/// Fit the ensemble on `d_env` with the streams `train` uses.
pub fn fit_model(d_env: &Dataset, cfg: &TrainConfig, rng: &Rng) -> Result<(EnsembleModel, TrainReport)> {
    train_ensemble(d_env, &cfg.model, &rng.derive(MODEL_STREAM))
}

pub fn train(d_env: &Dataset, cfg: &TrainConfig, rng: &Rng) -> Result<TrainOutput> {
    train_with(d_env, cfg, rng, None, |_, _, _| Ok(()))
}

/// Full training run. A pre-trained `model` skips ensemble fitting;
/// `on_epoch` sees the metrics and current networks after every epoch.
pub fn train_with(
    d_env: &Dataset,
    cfg: &TrainConfig,
    rng: &Rng,
    model: Option<EnsembleModel>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Actor, &Critics) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if d_env.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let (model, model_report) = match model {
        Some(m) => {
            if m.s_dim() != d_env.s_dim() || m.a_dim() != d_env.a_dim() {
                return Err(Error::invalid("model dimensions do not match the dataset"));
            }
            (m, None)
        }
        None => {
            let (m, r) = fit_model(d_env, cfg, rng)?;
            (m, Some(r))
        }
    };
    let (s_dim, a_dim) = (d_env.s_dim(), d_env.a_dim());
    let ctx_dim = if cfg.use_context { s_dim } else { 0 };
    let mut init = rng.derive(INIT_STREAM);
    let mut actor = Actor::new(s_dim, a_dim, ctx_dim, &cfg.sac.hidden, cfg.sac.lr, &mut init)?;
    let mut critics = Critics::new(s_dim + ctx_dim, a_dim, &cfg.sac, &mut init)?;
    let mut buf = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut metrics = Vec::new();

    for epoch in 0..cfg.resolved_epochs() {
        let stats = rollout_batch(&model, &actor, d_env, cfg, &mut buf, &rng.derive(ROLLOUT_STREAM).derive(epoch as u64))?;
        let mut sac_rng = rng.derive(SAC_STREAM).derive(epoch as u64);
        let (mut closs, mut aloss) = (0.0, 0.0);
        for _ in 0..cfg.grad_steps {
            let batch = sample_batch(d_env, &buf, cfg, ctx_dim, &mut sac_rng)?;
            closs += critic_update(&mut critics, &actor, &batch, cfg.sac.lr, &mut sac_rng)?;
            aloss += actor_update(&mut actor, &critics, &batch.inputs, cfg.sac.alpha, cfg.sac.lr, &mut sac_rng)?;
            critics.target_sync(cfg.sac.tau)?;
        }
        let g = cfg.grad_steps.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            mean_model_return: stats.mean_return,
            critic_loss: closs / g,
            actor_loss: aloss / g,
            buffer_size: buf.len(),
            nonfinite_branches: stats.nonfinite_branches,
        };
        if !m.critic_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                what: "critic loss".into(),
            });
        }
        if !m.actor_loss.is_finite() || actor.net().params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                what: "actor".into(),
            });
        }
        on_epoch(&m, &actor, &critics)?;
        metrics.push(m);
    }
    Ok(TrainOutput {
        actor,
        critics,
        model,
        model_report,
        metrics,
    })
}
