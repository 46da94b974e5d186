//! Finite discrete-time Markov chain sources.
//!
//! States are numbered `1..=N` at the public surface and stored 0-based.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

const STATIONARY_STEP_TOLERANCE: f64 = 1e-12;
const STATIONARY_MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    /// Row index is 1-based; deviation is `sum - 1`.
    #[error("row {row} is not stochastic (sum deviates from 1 by {deviation})")]
    RowNotStochastic { row: usize, deviation: f64 },
    #[error("negative or non-finite entry at ({row}, {col}): {value}")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("a chain needs at least 2 states, got {0}")]
    TooFewStates(usize),
    #[error("matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare { row: usize, len: usize, expected: usize },
    #[error("power iteration did not converge after {0} iterations (chain is not ergodic)")]
    NoConvergence(usize),
}

/// A source state, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct StateIndex(usize);

impl StateIndex {
    /// Returns `None` for 0.
    pub fn new(one_based: usize) -> Option<Self> {
        (one_based >= 1).then_some(Self(one_based))
    }

    pub fn from_zero_based(index: usize) -> Self {
        Self(index + 1)
    }

    /// The 1-based value.
    pub fn get(self) -> usize {
        self.0
    }

    /// The 0-based storage index.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl TryFrom<usize> for StateIndex {
    type Error = String;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        Self::new(value).ok_or_else(|| "state indices are 1-based".to_string())
    }
}

impl From<StateIndex> for usize {
    fn from(s: StateIndex) -> usize {
        s.0
    }
}

impl fmt::Display for StateIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Validated row-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ChainError> {
        let n = rows.len();
        if n < 2 {
            return Err(ChainError::TooFewStates(n));
        }
        let mut data = Vec::with_capacity(n * n);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ChainError::NotSquare { row: r + 1, len: row.len(), expected: n });
            }
            data.extend_from_slice(row);
        }
        let m = Self { n, data };
        m.validate()?;
        Ok(m)
    }

    /// Checks the stochastic invariants.
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.n < 2 {
            return Err(ChainError::TooFewStates(self.n));
        }
        for r in 0..self.n {
            let row = self.row(r);
            for (c, &v) in row.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(ChainError::NegativeEntry { row: r + 1, col: c + 1, value: v });
                }
            }
            let deviation = row.iter().sum::<f64>() - 1.0;
            if deviation.abs() > ROW_SUM_TOLERANCE {
                return Err(ChainError::RowNotStochastic { row: r + 1, deviation });
            }
        }
        Ok(())
    }

    pub fn identity(n: usize) -> Result<Self, ChainError> {
        Self::from_rows(
            (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row by 0-based index.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Entry by 0-based indices.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// Draws the next state. Consumes exactly one uniform variate.
    pub fn step<R: Rng + ?Sized>(&self, current: StateIndex, rng: &mut R) -> StateIndex {
        let u: f64 = rng.gen();
        let row = self.row(current.index());
        let mut acc = 0.0;
        let mut last_positive = current.index();
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last_positive = j;
                acc += p;
                if u < acc {
                    return StateIndex::from_zero_based(j);
                }
            }
        }
        // u landed in the rounding gap above the accumulated sum
        StateIndex::from_zero_based(last_positive)
    }

    /// Row vector times matrix.
    pub fn push_forward(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (m, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(m)) {
                *o += w * p;
            }
        }
        out
    }

    /// `P^k` as a dense row-major matrix. `P^0` is the identity.
    pub fn power(&self, k: u64) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut result: Vec<f64> = (0..n * n).map(|x| if x / n == x % n { 1.0 } else { 0.0 }).collect();
        let mut base = self.data.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = matmul(&result, &base, n);
            }
            e >>= 1;
            if e > 0 {
                base = matmul(&base, &base, n);
            }
        }
        result.chunks(n).map(<[f64]>::to_vec).collect()
    }

    /// Stationary distribution via power iteration on the full matrix.
    ///
    /// Iterates `M <- M P` from the identity until successive iterates agree
    /// to 1e-12 in max norm, then requires all rows to coincide. Reducible
    /// chains fail the row check and periodic ones never settle; both surface
    /// as [`ChainError::NoConvergence`].
    pub fn stationary(&self) -> Result<Vec<f64>, ChainError> {
        let n = self.n;
        let mut m: Vec<f64> = (0..n * n).map(|x| if x / n == x % n { 1.0 } else { 0.0 }).collect();
        for _ in 0..STATIONARY_MAX_ITERATIONS {
            let next = matmul(&m, &self.data, n);
            let diff = next.iter().zip(&m).fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
            m = next;
            if diff < STATIONARY_STEP_TOLERANCE {
                let first = &m[..n];
                let spread = (1..n)
                    .flat_map(|r| m[r * n..(r + 1) * n].iter().zip(first).map(|(a, b)| (a - b).abs()))
                    .fold(0.0f64, f64::max);
                if spread > 1e-9 {
                    return Err(ChainError::NoConvergence(STATIONARY_MAX_ITERATIONS));
                }
                let mut p: Vec<f64> =
                    (0..n).map(|j| (0..n).map(|r| m[r * n + j]).sum::<f64>() / n as f64).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                return Ok(p);
            }
        }
        Err(ChainError::NoConvergence(STATIONARY_MAX_ITERATIONS))
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// The binary source used throughout the experiments.
pub fn binary_source() -> TransitionMatrix {
    TransitionMatrix::from_rows(vec![vec![0.85, 0.15], vec![0.25, 0.75]]).expect("valid matrix")
}

/// The ternary source used throughout the experiments.
pub fn ternary_source() -> TransitionMatrix {
    TransitionMatrix::from_rows(vec![
        vec![0.70, 0.25, 0.05],
        vec![0.05, 0.90, 0.05],
        vec![0.10, 0.30, 0.60],
    ])
    .expect("valid matrix")
}
