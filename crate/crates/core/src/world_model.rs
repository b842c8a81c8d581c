//! Ensemble of probabilistic dynamics models.
//!
//! Each member maps whitened `(s, a)` to a diagonal Gaussian over the
//! standardized targets `(s' - s, r)`. Members train independently on
//! bootstrap resamples with their own random streams, so the ensemble is
//! identical whichever order (or thread) trains them.

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{clamp_log_std, AdamState, Activation, Mlp};
use crate::rng::Rng;
use crate::types::{Dataset, NormStats};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Largest norm of any member's predicted standard deviations.
    #[default]
    MaxAleatoric,
    /// Largest distance of any member's mean from the ensemble mean.
    Disagreement,
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_aleatoric" => Ok(PenaltyKind::MaxAleatoric),
            "disagreement" => Ok(PenaltyKind::Disagreement),
            other => Err(Error::Config(format!("unknown penalty '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout_frac: f64,
    pub bootstrap: bool,
    /// Every member draws from the same stream (identical init and batch
    /// order). Only useful together with `bootstrap = false`, for testing.
    pub shared_member_stream: bool,
    pub penalty: PenaltyKind,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n: 5,
            hidden: vec![64, 64],
            epochs: 50,
            batch: 256,
            lr: 1e-3,
            holdout_frac: 0.1,
            bootstrap: true,
            shared_member_stream: false,
            penalty: PenaltyKind::MaxAleatoric,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        if self.batch == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("ensemble batch and hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config("holdout fraction must lie in [0, 1)".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("ensemble lr must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    s_dim: usize,
    a_dim: usize,
    members: Vec<Mlp>,
    norm: NormStats,
    target_norm: NormStats,
    penalty: PenaltyKind,
    fitted: bool,
    config: Option<EnsembleConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPrediction {
    pub delta_mean: Vec<f64>,
    pub delta_std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Which member produced the Gaussian; `None` for ensemble averages.
    pub member_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    SampleMember,
    MeanOfMeans,
}

/// Raw-space outputs of every member for a batch of inputs. Row layout of
/// each matrix: `S_DIM` delta columns then one reward column.
#[derive(Clone, Debug)]
pub struct MemberOutputs {
    pub means: Vec<Array2<f64>>,
    pub stds: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample Gaussian NLL of each member on the held-out split
    /// (standardized targets). Empty when nothing was held out.
    pub val_nll: Vec<f64>,
    /// RMSE of the ensemble-mean state delta on the held-out split.
    pub val_delta_rmse: Option<f64>,
    pub n_train: usize,
    pub n_holdout: usize,
}

impl EnsembleModel {
    /// Assemble an ensemble from explicit members. Members take whitened
    /// `(s, a)` and emit `[delta/reward means, raw log-stds]` in standardized
    /// target space.
    pub fn from_parts(
        s_dim: usize,
        a_dim: usize,
        members: Vec<Mlp>,
        norm: NormStats,
        target_norm: NormStats,
        penalty: PenaltyKind,
    ) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid("ensemble needs at least 2 members"));
        }
        let out = 2 * (s_dim + 1);
        for m in &members {
            check_len("member input", s_dim + a_dim, m.input_dim())?;
            check_len("member output", out, m.output_dim())?;
        }
        check_len("input norm", s_dim + a_dim, norm.dim())?;
        check_len("target norm", s_dim + 1, target_norm.dim())?;
        Ok(Self {
            s_dim,
            a_dim,
            members,
            norm,
            target_norm,
            penalty,
            fitted: true,
            config: None,
        })
    }

    /// Two identical single-layer members predicting `delta = A s + B a + c`
    /// exactly, with zero reward and the narrowest allowed spread.
    pub fn affine(a: &[Vec<f64>], b: &[Vec<f64>], c: &[f64]) -> Result<Self> {
        let s_dim = c.len();
        check_len("A rows", s_dim, a.len())?;
        check_len("B rows", s_dim, b.len())?;
        let a_dim = b.first().map_or(0, Vec::len);
        let (inp, out) = (s_dim + a_dim, 2 * (s_dim + 1));
        let mut params = vec![0.0; inp * out + out];
        for j in 0..s_dim {
            check_len("A row", s_dim, a[j].len())?;
            check_len("B row", a_dim, b[j].len())?;
            for (i, w) in a[j].iter().chain(&b[j]).enumerate() {
                params[i * out + j] = *w;
            }
            params[inp * out + j] = c[j];
        }
        for j in s_dim + 1..out {
            params[inp * out + j] = -1e3;
        }
        let member = Mlp::from_params(&[inp, out], Activation::Tanh, params)?;
        Self::from_parts(
            s_dim,
            a_dim,
            vec![member.clone(), member],
            NormStats::identity(inp),
            NormStats::identity(s_dim + 1),
            PenaltyKind::default(),
        )
    }

    pub fn s_dim(&self) -> usize {
        self.s_dim
    }

    pub fn a_dim(&self) -> usize {
        self.a_dim
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn penalty(&self) -> PenaltyKind {
        self.penalty
    }

    pub fn set_penalty(&mut self, p: PenaltyKind) {
        self.penalty = p;
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn config(&self) -> Option<&EnsembleConfig> {
        self.config.as_ref()
    }

    fn whiten_rows(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut x = inputs.clone();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.norm.mean[j]) / self.norm.std[j];
            }
        }
        x
    }

    /// Forward every member on rows of raw `[s, a]`.
    pub fn forward_members(&self, inputs: &Array2<f64>) -> Result<MemberOutputs> {
        check_len("model input", self.s_dim + self.a_dim, inputs.ncols())?;
        let x = self.whiten_rows(inputs);
        let k = self.s_dim + 1;
        let mut means = Vec::with_capacity(self.n());
        let mut stds = Vec::with_capacity(self.n());
        for m in &self.members {
            let cache = m.forward_batch(x.clone())?;
            let out = cache.output();
            let mut mean = out.slice(s![.., ..k]).to_owned();
            let mut std = out.slice(s![.., k..]).to_owned();
            for j in 0..k {
                let (mu, sd) = (self.target_norm.mean[j], self.target_norm.std[j]);
                mean.column_mut(j).mapv_inplace(|v| v * sd + mu);
                std.column_mut(j).mapv_inplace(|v| clamp_log_std(v).0.exp() * sd);
            }
            means.push(mean);
            stds.push(std);
        }
        Ok(MemberOutputs { means, stds })
    }

    fn input_row(&self, s: &[f64], a: &[f64]) -> Result<Array2<f64>> {
        check_len("state", self.s_dim, s.len())?;
        check_len("action", self.a_dim, a.len())?;
        let row: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(Array2::from_shape_vec((1, row.len()), row).expect("row"))
    }

    pub fn member_predictions(&self, s: &[f64], a: &[f64]) -> Result<Vec<ModelPrediction>> {
        let out = self.forward_members(&self.input_row(s, a)?)?;
        Ok((0..self.n())
            .map(|i| {
                let m = out.means[i].row(0);
                let sd = out.stds[i].row(0);
                ModelPrediction {
                    delta_mean: m.slice(s![..self.s_dim]).to_vec(),
                    delta_std: sd.slice(s![..self.s_dim]).to_vec(),
                    reward_mean: m[self.s_dim],
                    reward_std: sd[self.s_dim],
                    member_index: Some(i),
                }
            })
            .collect())
    }

    pub fn predict(&self, s: &[f64], a: &[f64], mode: PredictMode, rng: &mut Rng) -> Result<ModelPrediction> {
        let mut preds = self.member_predictions(s, a)?;
        match mode {
            PredictMode::SampleMember => {
                let i = rng.index(self.n());
                Ok(preds.swap_remove(i))
            }
            PredictMode::MeanOfMeans => Ok(average(&preds, self.s_dim)),
        }
    }

    /// Ensemble-mean predicted state change at `(s, a)`.
    pub fn mean_delta(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(average(&self.member_predictions(s, a)?, self.s_dim).delta_mean)
    }

    pub fn uncertainty(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let out = self.forward_members(&self.input_row(s, a)?)?;
        Ok(self.uncertainty_rows(&out)[0])
    }

    /// Per-row penalty for a batch of member outputs.
    pub fn uncertainty_rows(&self, out: &MemberOutputs) -> Vec<f64> {
        let rows = out.means[0].nrows();
        (0..rows)
            .map(|r| match self.penalty {
                PenaltyKind::MaxAleatoric => out
                    .stds
                    .iter()
                    .map(|sd| sd.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .fold(0.0, f64::max),
                PenaltyKind::Disagreement => {
                    let k = out.means[0].ncols();
                    let n = out.means.len() as f64;
                    let avg: Vec<f64> = (0..k)
                        .map(|j| out.means.iter().map(|m| m[[r, j]]).sum::<f64>() / n)
                        .collect();
                    out.means
                        .iter()
                        .map(|m| {
                            (0..k)
                                .map(|j| (m[[r, j]] - avg[j]).powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(0.0, f64::max)
                }
            })
            .collect()
    }
}

fn average(preds: &[ModelPrediction], s_dim: usize) -> ModelPrediction {
    let n = preds.len() as f64;
    let mut delta_mean = vec![0.0; s_dim];
    let mut delta_std = vec![0.0; s_dim];
    let (mut reward_mean, mut reward_std) = (0.0, 0.0);
    for p in preds {
        for j in 0..s_dim {
            delta_mean[j] += p.delta_mean[j];
            delta_std[j] += p.delta_std[j];
        }
        reward_mean += p.reward_mean;
        reward_std += p.reward_std;
    }
    delta_mean.iter_mut().chain(delta_std.iter_mut()).for_each(|x| *x /= n);
    ModelPrediction {
        delta_mean,
        delta_std,
        reward_mean: reward_mean / n,
        reward_std: reward_std / n,
        member_index: None,
    }
}

pub fn penalized_reward(r_hat: f64, u: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("penalty coefficient {lambda} must be non-negative")));
    }
    if !(u >= 0.0) {
        return Err(Error::invalid(format!("uncertainty {u} must be non-negative")));
    }
    Ok(r_hat - lambda * u)
}

const SPLIT_STREAM: u64 = 1;
const MEMBER_STREAM: u64 = 100;

/// Random initialization of member `i` as `train_ensemble` performs it.
pub fn init_member(cfg: &EnsembleConfig, s_dim: usize, a_dim: usize, rng: &Rng, i: usize) -> Result<(Mlp, Rng)> {
    let tag = if cfg.shared_member_stream { 0 } else { i as u64 };
    let mut member_rng = rng.derive(MEMBER_STREAM + tag);
    let mut sizes = vec![s_dim + a_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(2 * (s_dim + 1));
    let net = Mlp::new(&sizes, Activation::Tanh, &mut member_rng)?;
    Ok((net, member_rng))
}

pub fn train_ensemble(d: &Dataset, cfg: &EnsembleConfig, rng: &Rng) -> Result<(EnsembleModel, TrainReport)> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::invalid("cannot train an ensemble on an empty dataset"));
    }
    if d.len() < cfg.batch {
        return Err(Error::invalid(format!(
            "dataset has {} transitions, fewer than the batch size {}",
            d.len(),
            cfg.batch
        )));
    }
    let (s_dim, a_dim) = (d.s_dim(), d.a_dim());
    let norm = NormStats::compute(d)?;
    let targets: Vec<Vec<f64>> = d
        .transitions()
        .iter()
        .map(|t| {
            let mut v = t.delta();
            v.push(t.reward);
            v
        })
        .collect();
    let target_norm = NormStats::from_rows(s_dim + 1, targets.iter().map(Vec::as_slice))?;

    let n = d.len();
    let in_dim = s_dim + a_dim;
    let k = s_dim + 1;
    let mut x = Array2::zeros((n, in_dim));
    let mut y = Array2::zeros((n, k));
    let mut buf = vec![0.0; in_dim];
    for (i, t) in d.transitions().iter().enumerate() {
        let raw: Vec<f64> = t.state.iter().chain(&t.action).copied().collect();
        norm.whiten_into(&raw, &mut buf);
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&buf[..]));
        for j in 0..k {
            y[[i, j]] = (targets[i][j] - target_norm.mean[j]) / target_norm.std[j];
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    rng.derive(SPLIT_STREAM).shuffle(&mut order);
    let n_holdout = ((n as f64) * cfg.holdout_frac).floor() as usize;
    let (holdout, train_idx) = order.split_at(n_holdout);
    if train_idx.len() < cfg.batch {
        return Err(Error::invalid("training split smaller than the batch size"));
    }

    let members: Vec<Result<Mlp>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let (mut net, mut mrng) = init_member(cfg, s_dim, a_dim, rng, i)?;
            let sample: Vec<usize> = if cfg.bootstrap {
                (0..train_idx.len())
                    .map(|_| train_idx[mrng.index(train_idx.len())])
                    .collect()
            } else {
                train_idx.to_vec()
            };
            fit_member(&mut net, &x, &y, sample, cfg, &mut mrng)?;
            Ok(net)
        })
        .collect();
    let members = members.into_iter().collect::<Result<Vec<_>>>()?;

    let mut model = EnsembleModel {
        s_dim,
        a_dim,
        members,
        norm,
        target_norm,
        penalty: cfg.penalty,
        fitted: cfg.epochs > 0,
        config: Some(cfg.clone()),
    };
    let report = model.holdout_report(d, &x, &y, holdout, train_idx.len())?;
    model.fitted = cfg.epochs > 0;
    Ok((model, report))
}

fn fit_member(
    net: &mut Mlp,
    x: &Array2<f64>,
    y: &Array2<f64>,
    mut sample: Vec<usize>,
    cfg: &EnsembleConfig,
    rng: &mut Rng,
) -> Result<()> {
    let k = y.ncols();
    let mut opt = AdamState::new(net.num_params(), cfg.lr);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut sample);
        for chunk in sample.chunks(cfg.batch) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let cache = net.forward_batch(xb)?;
            let out = cache.output();
            let b = chunk.len() as f64;
            let mut d_out = Array2::zeros(out.dim());
            for r in 0..out.nrows() {
                for j in 0..k {
                    let (ls, dls) = clamp_log_std(out[[r, k + j]]);
                    let inv_var = (-2.0 * ls).exp();
                    let err = yb[[r, j]] - out[[r, j]];
                    d_out[[r, j]] = -err * inv_var / b;
                    d_out[[r, k + j]] = (1.0 - err * err * inv_var) * dls / b;
                }
            }
            let g = net.backward(&cache, d_out.view())?;
            opt.step(net.params_mut(), &g.params)?;
        }
    }
    Ok(())
}

impl EnsembleModel {
    fn holdout_report(
        &self,
        d: &Dataset,
        x: &Array2<f64>,
        y: &Array2<f64>,
        holdout: &[usize],
        n_train: usize,
    ) -> Result<TrainReport> {
        if holdout.is_empty() {
            return Ok(TrainReport {
                val_nll: Vec::new(),
                val_delta_rmse: None,
                n_train,
                n_holdout: 0,
            });
        }
        let k = self.s_dim + 1;
        let xh = x.select(Axis(0), holdout);
        let yh = y.select(Axis(0), holdout);
        let mut val_nll = Vec::with_capacity(self.n());
        let mut mean_sum = Array2::<f64>::zeros((holdout.len(), k));
        for m in &self.members {
            let cache = m.forward_batch(xh.clone())?;
            let out = cache.output();
            let mut total = 0.0;
            for r in 0..out.nrows() {
                let mean: Vec<f64> = (0..k).map(|j| out[[r, j]]).collect();
                let ls: Vec<f64> = (0..k).map(|j| clamp_log_std(out[[r, k + j]]).0).collect();
                let tgt: Vec<f64> = (0..k).map(|j| yh[[r, j]]).collect();
                total += crate::nn::gaussian_nll(&mean, &ls, &tgt)?.loss;
            }
            val_nll.push(total / holdout.len() as f64);
            mean_sum += &out.slice(s![.., ..k]);
        }
        mean_sum /= self.n() as f64;
        let mut sq = 0.0;
        for (r, &i) in holdout.iter().enumerate() {
            let truth = d.get(i).delta();
            for j in 0..self.s_dim {
                let pred = self.target_norm.unwhiten(j, mean_sum[[r, j]]);
                sq += (pred - truth[j]).powi(2);
            }
        }
        Ok(TrainReport {
            val_nll,
            val_delta_rmse: Some((sq / (holdout.len() * self.s_dim) as f64).sqrt()),
            n_train,
            n_holdout: holdout.len(),
        })
    }
}
