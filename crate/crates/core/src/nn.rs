//! Small dense networks with hand-written reverse mode, Adam, and the
//! Gaussian negative log-likelihood used by the probabilistic models.
//!
//! Parameters of an [`Mlp`] live in one flat buffer; layer `l` stores its
//! weight matrix as `in x out` row-major followed by its bias. Gradients use
//! the same layout, so optimizers and Polyak averaging work on plain slices.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpCheckpoint", try_from = "MlpCheckpoint")]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// On-disk form: per-layer flat weight (`in x out`, row-major) and bias arrays.
#[derive(Serialize, Deserialize)]
struct MlpCheckpoint {
    sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpCheckpoint {
    fn from(m: Mlp) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..m.n_layers() {
            let (w, b) = m.layer_ranges(l);
            weights.push(m.params[w].to_vec());
            biases.push(m.params[b].to_vec());
        }
        Self {
            sizes: m.sizes,
            activation: m.activation,
            weights,
            biases,
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(c: MlpCheckpoint) -> Result<Self> {
        let mut params = Vec::new();
        if c.weights.len() != c.biases.len() {
            return Err(Error::invalid("checkpoint weight/bias layer counts differ"));
        }
        for (w, b) in c.weights.iter().zip(&c.biases) {
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        Mlp::from_params(&c.sizes, c.activation, params)
    }
}

/// Intermediate activations of a batched forward pass; row `i` of every
/// matrix belongs to input row `i`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.output().nrows()
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    /// Gradient with respect to the network input, one row per sample.
    pub input: Array2<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. The last layer is linear.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        for l in 0..m.n_layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = m.layer_ranges(l);
            for p in &mut m.params[w] {
                *p = rng.uniform_in(-bound, bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        check_len("mlp parameters", m.params.len(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (w, b) = self.layer_ranges(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (
            ArrayView2::from_shape((i, o), &self.params[w]).expect("layer shape"),
            ArrayView1::from(&self.params[b]),
        )
    }

    pub fn forward_batch(&self, x: Array2<f64>) -> Result<ForwardCache> {
        check_len("network input", self.input_dim(), x.ncols())?;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(x);
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = activations[l].dot(&w);
            z += &b;
            if l + 1 < self.n_layers() {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        self.forward_batch(row)
    }

    /// Output for a single input, without keeping a cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output().row(0).to_vec())
    }

    /// Reverse pass for the scalar loss `sum_i <d_out[i], out[i]>`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<'_, f64>) -> Result<Gradients> {
        if cache.activations.len() != self.sizes.len() {
            return Err(Error::invalid("forward cache does not belong to this network"));
        }
        for (a, &s) in cache.activations.iter().zip(&self.sizes) {
            check_len("cached activation width", s, a.ncols())?;
        }
        check_len("output gradient width", self.output_dim(), d_out.ncols())?;
        check_len("output gradient rows", cache.batch_size(), d_out.nrows())?;

        let mut grads = vec![0.0; self.params.len()];
        let mut delta = d_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            if l + 1 < self.n_layers() {
                let act = self.activation;
                delta.zip_mut_with(&cache.activations[l + 1], |d, &y| {
                    *d *= act.grad_from_output(y)
                });
            }
            let (wr, br) = self.layer_ranges(l);
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let dw = cache.activations[l].t().dot(&delta);
            debug_assert_eq!(dw.dim(), (i, o));
            for (g, v) in grads[wr].iter_mut().zip(dw.iter()) {
                *g = *v;
            }
            for (g, v) in grads[br].iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                *g = *v;
            }
            let (w, _) = self.layer(l);
            delta = delta.dot(&w.t());
        }
        Ok(Gradients {
            params: grads,
            input: delta,
        })
    }

    /// `self <- (1 - tau) * self + tau * source`, parameter-wise.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if self.sizes != source.sizes {
            return Err(Error::invalid("polyak update between differently shaped networks"));
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - tau) * *t + tau * s;
        }
        Ok(())
    }
}

/// Worst disagreement between [`Mlp::backward`] and central differences of
/// `sum <d_out, forward(x)>` with step `h`, over every parameter and input.
/// Each error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradcheck(net: &Mlp, x: &Array2<f64>, d_out: &Array2<f64>, h: f64, floor: f64) -> Result<f64> {
    let loss = |m: &Mlp, x: &Array2<f64>| -> Result<f64> {
        Ok((m.forward_batch(x.clone())?.output() * d_out).sum())
    };
    let g = net.backward(&net.forward_batch(x.clone())?, d_out.view())?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.params.len() {
        let p = net.params[i];
        probe.params[i] = p + h;
        let up = loss(&probe, x)?;
        probe.params[i] = p - h;
        let down = loss(&probe, x)?;
        probe.params[i] = p;
        worst = worst.max(rel(g.params[i], (up - down) / (2.0 * h)));
    }
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let v = x[[r, c]];
        xp[[r, c]] = v + h;
        let up = loss(net, &xp)?;
        xp[[r, c]] = v - h;
        let down = loss(net, &xp)?;
        xp[[r, c]] = v;
        worst = worst.max(rel(g.input[[r, c]], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam step, minimizing.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradients", self.m.len(), grads.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth clamp of `x` into `[lo, hi]`; returns the value and `d value / d x`.
/// Well inside the band it is close to the identity; far outside it saturates at the
/// bound in double precision. The smooth form overshoots `hi` by at most
/// `softplus(lo - hi)`, which is cut off.
pub fn soft_clamp(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - x);
    let d_upper = sigmoid(hi - x);
    let out = lo + softplus(upper - lo);
    if out > hi {
        return (hi, 0.0);
    }
    (out, sigmoid(upper - lo) * d_upper)
}

/// Diagonal Gaussian head: `raw` log-std outputs squeezed into
/// `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn clamp_log_std(raw: f64) -> (f64, f64) {
    soft_clamp(raw, LOG_STD_MIN, LOG_STD_MAX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNll {
    pub loss: f64,
    pub d_mean: Vec<f64>,
    pub d_log_std: Vec<f64>,
}

/// `sum_i log_std_i + ln(2 pi) / 2 + ((target_i - mean_i) / exp(log_std_i))^2 / 2`
/// with its exact gradients.
pub fn gaussian_nll(mean: &[f64], log_std: &[f64], target: &[f64]) -> Result<GaussianNll> {
    check_len("log_std", mean.len(), log_std.len())?;
    check_len("target", mean.len(), target.len())?;
    let mut loss = 0.0;
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_log_std = Vec::with_capacity(mean.len());
    for i in 0..mean.len() {
        let inv_var = (-2.0 * log_std[i]).exp();
        let err = target[i] - mean[i];
        let sq = err * err * inv_var;
        loss += log_std[i] + HALF_LN_2PI + 0.5 * sq;
        d_mean.push(-err * inv_var);
        d_log_std.push(1.0 - sq);
    }
    Ok(GaussianNll {
        loss,
        d_mean,
        d_log_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_net_outputs_zero() {
        let m = Mlp::zeros(&[3, 8, 2], Activation::Tanh).unwrap();
        assert_eq!(m.predict(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_single_layer() {
        let m = Mlp::from_params(&[1, 1], Activation::Tanh, vec![2.0, 1.0]).unwrap();
        assert_eq!(m.predict(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Mlp::new(&[2, 16, 2], Activation::Tanh, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(m.predict(&[0.3, -0.1]).unwrap(), m.predict(&[0.3, -0.1]).unwrap());
    }

    #[test]
    fn wrong_input_width_errors() {
        let m = Mlp::zeros(&[2, 2], Activation::Relu).unwrap();
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn hand_chain_rule() {
        let m = Mlp::from_params(&[1, 1], Activation::Tanh, vec![0.5, -1.0]).unwrap();
        let cache = m.forward(&[3.0]).unwrap();
        let g = m.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(g.params, vec![3.0, 1.0]);
        assert_eq!(g.input, array![[0.5]]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, &mut Rng::new(1, 0)).unwrap();
        let cache = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let g = m.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.params.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn foreign_cache_rejected() {
        let a = Mlp::zeros(&[2, 3, 1], Activation::Tanh).unwrap();
        let b = Mlp::zeros(&[2, 1], Activation::Tanh).unwrap();
        let cache = b.forward(&[0.0, 0.0]).unwrap();
        assert!(a.backward(&cache, array![[1.0]].view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::new(&[3, 7, 2], Activation::Relu, &mut Rng::new(2, 0)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["weights"][0].as_array().unwrap().len(), 21);
        assert_eq!(v["biases"][1].as_array().unwrap().len(), 2);
        let back: Mlp = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut st = AdamState::new(1, 1e-3);
        let mut p = [0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-6);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(3, 1e-2);
        let mut p = [1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut st = AdamState::new(2, 0.0);
        let mut p = [0.25, -4.0];
        for _ in 0..10 {
            st.step(&mut p, &[3.0, -1.0]).unwrap();
        }
        assert_eq!(p, [0.25, -4.0]);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut st = AdamState::new(1, 0.01);
        let mut theta = [1.0];
        for _ in 0..500 {
            let g = 2.0 * theta[0];
            st.step(&mut theta, &[g]).unwrap();
        }
        assert!(theta[0].abs() < 0.05, "{}", theta[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2, 0.1);
        assert!(st.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn nll_closed_form() {
        let r = gaussian_nll(&[0.0], &[0.0], &[0.0]).unwrap();
        assert!((r.loss - 0.918939).abs() < 1e-6);
    }

    #[test]
    fn nll_stationary_at_target() {
        let r = gaussian_nll(&[0.7, -1.2], &[0.3, -2.0], &[0.7, -1.2]).unwrap();
        assert_eq!(r.d_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn nll_gradient_sign_around_target() {
        let below = gaussian_nll(&[0.9], &[0.1], &[1.0]).unwrap();
        let above = gaussian_nll(&[1.1], &[0.1], &[1.0]).unwrap();
        assert!(below.d_mean[0] < 0.0 && above.d_mean[0] > 0.0);
    }

    #[test]
    fn nll_matches_finite_differences() {
        let mut rng = Rng::new(9, 0);
        let h = 1e-6;
        for _ in 0..50 {
            let n = 3;
            let mean: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let ls: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 1.0)).collect();
            let tgt: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let g = gaussian_nll(&mean, &ls, &tgt).unwrap();
            let f = |m: &[f64], l: &[f64]| gaussian_nll(m, l, &tgt).unwrap().loss;
            for i in 0..n {
                let (mut mp, mut mm) = (mean.clone(), mean.clone());
                mp[i] += h;
                mm[i] -= h;
                let num = (f(&mp, &ls) - f(&mm, &ls)) / (2.0 * h);
                assert!((num - g.d_mean[i]).abs() / g.d_mean[i].abs().max(1e-3) < 1e-5);
                let (mut lp, mut lm) = (ls.clone(), ls.clone());
                lp[i] += h;
                lm[i] -= h;
                let num = (f(&mean, &lp) - f(&mean, &lm)) / (2.0 * h);
                assert!((num - g.d_log_std[i]).abs() / g.d_log_std[i].abs().max(1e-3) < 1e-5);
            }
        }
    }

    #[test]
    fn soft_clamp_bounds_and_derivative() {
        for &x in &[-100.0, -6.0, -5.0, -1.0, 0.0, 1.9, 2.0, 3.0, 100.0] {
            let (y, dy) = clamp_log_std(x);
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&y), "{x} -> {y}");
            let h = 1e-6;
            let num = (clamp_log_std(x + h).0 - clamp_log_std(x - h).0) / (2.0 * h);
            assert!((num - dy).abs() < 1e-6);
        }
        assert_eq!(clamp_log_std(-200.0).0, LOG_STD_MIN);
        // The band is only 7 wide, so mid-band values are shifted slightly.
        assert!((clamp_log_std(0.0).0 + 0.119_307).abs() < 1e-6);
        assert!(clamp_log_std(-1.0).0 < clamp_log_std(-0.9).0);
    }

    #[test]
    fn polyak_arithmetic() {
        let online = Mlp::from_params(&[1, 1], Activation::Tanh, vec![1.0, 1.0]).unwrap();
        let mut target = Mlp::zeros(&[1, 1], Activation::Tanh).unwrap();
        target.polyak_from(&online, 0.5).unwrap();
        target.polyak_from(&online, 0.5).unwrap();
        assert_eq!(target.params(), &[0.75, 0.75]);
    }
}
