//! Dynamics augmentation operators applied to `(s, a, r, s')` tuples.
//!
//! * `Rad`  scales both states: `(z * s, a, r, z * s')`
//! * `Rans` scales only the next state: `(s, a, r, z * s')`
//! * `Das`  scales the state change: `(s, a, r, s + z * (s' - s))`
//!
//! `z` is drawn per tuple from `Unif([lo, hi]^|S|)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;
use crate::types::{ContextVector, Transition};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    None,
    Rad,
    Rans,
    #[default]
    Das,
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugKind::None => "none",
            AugKind::Rad => "rad",
            AugKind::Rans => "rans",
            AugKind::Das => "das",
        })
    }
}

impl FromStr for AugKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AugKind::None),
            "rad" => Ok(AugKind::Rad),
            "rans" => Ok(AugKind::Rans),
            "das" => Ok(AugKind::Das),
            other => Err(Error::Config(format!("unknown augmentation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRange {
    lo: f64,
    hi: f64,
}

impl AugRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("augmentation range [{lo}, {hi}] needs 0 < lo <= hi")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

impl Default for AugRange {
    fn default() -> Self {
        Self { lo: 0.5, hi: 1.5 }
    }
}

pub fn sample_z(range: AugRange, s_dim: usize, rng: &mut Rng) -> ContextVector {
    let z = (0..s_dim).map(|_| rng.uniform_in(range.lo, range.hi)).collect();
    ContextVector::new(z).expect("range is positive")
}

pub fn apply(kind: AugKind, z: &ContextVector, t: &Transition) -> Result<Transition> {
    check_len("augmentation context", t.state.len(), z.len())?;
    let z = z.as_slice();
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().zip(z).map(|(x, z)| x * z).collect() };
    let (state, next_state) = match kind {
        AugKind::None => (t.state.clone(), t.next_state.clone()),
        AugKind::Rad => (scale(&t.state), scale(&t.next_state)),
        AugKind::Rans => (t.state.clone(), scale(&t.next_state)),
        AugKind::Das => {
            let next = t
                .state
                .iter()
                .zip(&t.next_state)
                .zip(z)
                .map(|((s, n), z)| s + z * (n - s))
                .collect();
            (t.state.clone(), next)
        }
    };
    Ok(Transition {
        state,
        action: t.action.clone(),
        reward: t.reward,
        next_state,
        done: t.done,
    })
}
