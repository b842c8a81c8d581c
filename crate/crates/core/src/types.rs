//! Shared domain types: transitions, datasets, whitening statistics and the
//! per-timestep context vector, plus the JSON-Lines dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: Vec<f64>,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: Vec<f64>,
    #[serde(rename = "d")]
    pub done: bool,
}

impl Transition {
    /// `next_state - state`, component-wise.
    pub fn delta(&self) -> Vec<f64> {
        self.next_state
            .iter()
            .zip(&self.state)
            .map(|(n, s)| n - s)
            .collect()
    }

    fn check(&self, s_dim: usize, a_dim: usize) -> std::result::Result<(), String> {
        if self.state.len() != s_dim {
            return Err(format!("state has length {}, expected {s_dim}", self.state.len()));
        }
        if self.next_state.len() != s_dim {
            return Err(format!(
                "next_state has length {}, expected {s_dim}",
                self.next_state.len()
            ));
        }
        if self.action.len() != a_dim {
            return Err(format!("action has length {}, expected {a_dim}", self.action.len()));
        }
        let finite = self
            .state
            .iter()
            .chain(&self.next_state)
            .chain(&self.action)
            .all(|x| x.is_finite());
        if !finite || !self.reward.is_finite() {
            return Err("non-finite component".into());
        }
        if self.action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err("action component outside [-1, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    s_dim: usize,
    a_dim: usize,
    transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    s_dim: usize,
    a_dim: usize,
    version: u32,
}

impl Dataset {
    pub fn new(s_dim: usize, a_dim: usize) -> Result<Self> {
        if s_dim == 0 || a_dim == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        Ok(Self {
            s_dim,
            a_dim,
            transitions: Vec::new(),
        })
    }

    pub fn from_transitions(s_dim: usize, a_dim: usize, transitions: Vec<Transition>) -> Result<Self> {
        let d = Self {
            transitions,
            ..Self::new(s_dim, a_dim)?
        };
        d.validate()?;
        Ok(d)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.check(self.s_dim, self.a_dim).map_err(|msg| Error::InvalidRecord {
            index: self.transitions.len(),
            msg,
        })?;
        self.transitions.push(t);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (index, t) in self.transitions.iter().enumerate() {
            t.check(self.s_dim, self.a_dim)
                .map_err(|msg| Error::InvalidRecord { index, msg })?;
        }
        Ok(())
    }

    pub fn s_dim(&self) -> usize {
        self.s_dim
    }

    pub fn a_dim(&self) -> usize {
        self.a_dim
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            s_dim: self.s_dim,
            a_dim: self.a_dim,
            version: DATASET_VERSION,
        };
        let write_err = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(write_err)?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(write_err)?;
        }
        w.flush().map_err(write_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        };
        let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        if header.version != DATASET_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported version {}", header.version),
            });
        }
        let mut d = Dataset::new(header.s_dim, header.a_dim).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            t.check(d.s_dim, d.a_dim)
                .map_err(|msg| Error::Parse { line: line_no, msg })?;
            d.transitions.push(t);
        }
        Ok(d)
    }
}

/// Per-component mean and (population) standard deviation over the
/// concatenated `(state, action)` model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over arbitrary rows. Each column is summed in sorted order,
    /// so the result does not depend on row order.
    pub fn from_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Result<Self> {
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for row in rows {
            crate::error::check_len("row", dim, row.len())?;
            for (c, &x) in cols.iter_mut().zip(row) {
                c.push(x);
            }
        }
        let n = cols.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::invalid("cannot compute statistics of an empty dataset"));
        }
        let mut mean = Vec::with_capacity(dim);
        let mut std = Vec::with_capacity(dim);
        for c in &mut cols {
            c.sort_by(f64::total_cmp);
            let m = c.iter().sum::<f64>() / n as f64;
            let mut sq: Vec<f64> = c.iter().map(|x| (x - m) * (x - m)).collect();
            sq.sort_by(f64::total_cmp);
            let var = sq.iter().sum::<f64>() / n as f64;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    pub fn compute(d: &Dataset) -> Result<Self> {
        let rows: Vec<Vec<f64>> = d
            .transitions()
            .iter()
            .map(|t| t.state.iter().chain(&t.action).copied().collect())
            .collect();
        Self::from_rows(d.s_dim() + d.a_dim(), rows.iter().map(Vec::as_slice))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn whiten_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, &x), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (x - m) / s;
        }
    }

    pub fn unwhiten(&self, i: usize, z: f64) -> f64 {
        z * self.std[i] + self.mean[i]
    }
}

pub fn compute_norm_stats(d: &Dataset) -> Result<NormStats> {
    NormStats::compute(d)
}

/// Context `z`: a strictly positive, finite vector with one entry per state
/// dimension. The neutral context is all ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector(Vec<f64>);

impl ContextVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::invalid("context components must be finite and positive"));
        }
        Ok(Self(z))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn linf_distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl AsRef<[f64]> for ContextVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
