//! Joint age–state belief of the monitor.
//!
//! Entry `(i, d)` is the probability that the source is in state `i` and the
//! AoII equals `d`, given every observation so far. The age axis is capped
//! at `delta_max`; the last column absorbs all larger ages.
//!
//! The age described by the belief at slot `t` is the one that already
//! accounts for the slot-`t` comparison between the source and the estimate:
//! it is zero exactly when `X_t` equals the estimate.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, StateIndex, TransitionMatrix};
use crate::sim::Action;

/// Total mass must stay within this of 1.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Entries below this are flushed to zero after every propagation.
pub const FLUSH_THRESHOLD: f64 = 1e-15;
/// Relative gap under which two marginal probabilities count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

const STEADY_STATE_TOLERANCE: f64 = 1e-12;
const STEADY_STATE_MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("observed state {state} has belief probability {probability:e}")]
    ImpossibleObservation { state: StateIndex, probability: f64 },
    #[error("martingale estimator has not received any sample yet")]
    MartingaleUninitialized,
    #[error("belief recursion did not settle after {0} slots")]
    NoConvergence(usize),
    #[error("invalid belief: {0}")]
    Invalid(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

pub type Result<T> = std::result::Result<T, BeliefError>;

/// What the monitor receives at the start of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Observation {
    Empty,
    Delivered(StateIndex),
}

impl std::fmt::Display for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observation::Empty => f.write_str("empty"),
            Observation::Delivered(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Most likely current state under the belief.
    Map,
    /// Latest delivered sample.
    Martingale,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Map => "map",
            EstimatorKind::Martingale => "martingale",
        })
    }
}

/// Estimation rule plus whatever state it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Estimator {
    pub kind: EstimatorKind,
    pub last_received: Option<StateIndex>,
}

impl Estimator {
    pub fn map() -> Self {
        Self { kind: EstimatorKind::Map, last_received: None }
    }

    pub fn martingale(last_received: Option<StateIndex>) -> Self {
        Self { kind: EstimatorKind::Martingale, last_received }
    }

    /// Estimator of the given kind for a monitor that knows the initial state.
    pub fn warm(kind: EstimatorKind, start: StateIndex) -> Self {
        Self { kind, last_received: Some(start) }
    }

    pub fn record(&mut self, o: Observation) {
        if let Observation::Delivered(s) = o {
            self.last_received = Some(s);
        }
    }

    /// Estimate from a marginal state distribution.
    pub fn estimate_from_marginal(&self, pi: &[f64]) -> Result<StateIndex> {
        match self.kind {
            EstimatorKind::Map => Ok(argmax_smallest(pi)),
            EstimatorKind::Martingale => self.last_received.ok_or(BeliefError::MartingaleUninitialized),
        }
    }

    pub fn estimate(&self, b: &Belief) -> Result<StateIndex> {
        self.estimate_from_marginal(&b.marginal())
    }
}

/// Argmax with ties resolved toward the smallest state.
pub fn argmax_smallest(pi: &[f64]) -> StateIndex {
    let max = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = max - TIE_TOLERANCE * max.abs().max(1.0);
    let i = pi.iter().position(|&v| v >= cutoff).unwrap_or(0);
    StateIndex::from_zero_based(i)
}

/// Where a belief starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Start {
    Known(StateIndex),
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    n: usize,
    delta_max: usize,
    /// State-major: entry `(i, d)` at `i * (delta_max + 1) + d`.
    mass: Vec<f64>,
}

impl Belief {
    pub fn zeros(n: usize, delta_max: usize) -> Self {
        Self { n, delta_max, mass: vec![0.0; n * (delta_max + 1)] }
    }

    pub fn point_mass(n: usize, delta_max: usize, state: StateIndex) -> Self {
        let mut b = Self::zeros(n, delta_max);
        *b.entry_mut(state.index(), 0) = 1.0;
        b
    }

    /// Builds a belief from `(state, delta, mass)` triples and validates it.
    pub fn from_entries(n: usize, delta_max: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut b = Self::zeros(n, delta_max);
        for &(s, d, m) in entries {
            if s == 0 || s > n || d > delta_max {
                return Err(BeliefError::Invalid(format!("entry ({s}, {d}) out of range")));
            }
            *b.entry_mut(s - 1, d) += m;
        }
        b.check()?;
        Ok(b)
    }

    /// Wraps a flat state-major vector.
    pub fn from_flat(n: usize, delta_max: usize, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != n * (delta_max + 1) {
            return Err(BeliefError::Invalid(format!("expected {} entries, got {}", n * (delta_max + 1), mass.len())));
        }
        let b = Self { n, delta_max, mass };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<()> {
        if let Some(v) = self.mass.iter().find(|v| !(0.0..=1.0 + MASS_TOLERANCE).contains(*v)) {
            return Err(BeliefError::Invalid(format!("entry {v} outside [0, 1]")));
        }
        let total = self.total();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(BeliefError::Invalid(format!("total mass {total}")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta_max(&self) -> usize {
        self.delta_max
    }

    pub fn width(&self) -> usize {
        self.delta_max + 1
    }

    /// Flat state-major view, the network input layout.
    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    /// Entry by 0-based state index.
    #[inline]
    pub fn get(&self, state: usize, delta: usize) -> f64 {
        self.mass[state * self.width() + delta]
    }

    pub fn at(&self, state: StateIndex, delta: usize) -> f64 {
        self.get(state.index(), delta)
    }

    #[inline]
    fn entry_mut(&mut self, state: usize, delta: usize) -> &mut f64 {
        let w = self.width();
        &mut self.mass[state * w + delta]
    }

    fn row(&self, state: usize) -> &[f64] {
        let w = self.width();
        &self.mass[state * w..(state + 1) * w]
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Marginal distribution of the source state.
    pub fn marginal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Expected AoII, which is also the no-pull instantaneous cost.
    pub fn expected_aoii(&self) -> f64 {
        (0..self.n).map(|i| self.row(i).iter().enumerate().map(|(d, &m)| d as f64 * m).sum::<f64>()).sum()
    }

    /// Per-slot cost of taking `action` under pull price `lambda`.
    pub fn reward(&self, action: Action, lambda: f64) -> f64 {
        self.expected_aoii() + if action.is_pull() { lambda } else { 0.0 }
    }

    /// Conditions on the observation.
    ///
    /// A delivered sample reveals the previous source state, so every other
    /// row is cleared and the revealed row is divided by its marginal mass.
    /// Dividing by the marginal rather than by the age-column sum is what
    /// keeps the result a probability distribution.
    pub fn observe(&self, o: Observation) -> Result<Belief> {
        let state = match o {
            Observation::Empty => return Ok(self.clone()),
            Observation::Delivered(s) => s,
        };
        let i = state.index();
        if i >= self.n {
            return Err(BeliefError::Invalid(format!("state {state} outside 1..={}", self.n)));
        }
        let pi_i: f64 = self.row(i).iter().sum();
        if pi_i <= FLUSH_THRESHOLD {
            return Err(BeliefError::ImpossibleObservation { state, probability: pi_i });
        }
        let mut out = Belief::zeros(self.n, self.delta_max);
        let w = self.width();
        for (dst, &src) in out.mass[i * w..(i + 1) * w].iter_mut().zip(self.row(i)) {
            *dst = src / pi_i;
        }
        Ok(out)
    }

    /// Advances one slot with no new information.
    ///
    /// The estimated state keeps only its zero-age entry, holding its full
    /// predicted probability. Every other state inherits the age distribution
    /// of the previous slot shifted by one, with the last column saturating.
    pub fn propagate(&self, p: &TransitionMatrix, est: &Estimator) -> Result<(Belief, StateIndex)> {
        let n = self.n;
        let w = self.width();
        let pi_next = p.push_forward(&self.marginal());
        let x_hat = est.estimate_from_marginal(&pi_next)?;
        let xh = x_hat.index();

        let mut out = Belief::zeros(n, self.delta_max);
        for m in 0..n {
            let src = self.row(m);
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in (0..n).filter(|&i| i != xh) {
                let pmi = p.get(m, i);
                if pmi == 0.0 {
                    continue;
                }
                let dst = &mut out.mass[i * w..(i + 1) * w];
                for d in 0..self.delta_max {
                    dst[d + 1] += src[d] * pmi;
                }
                dst[self.delta_max] += src[self.delta_max] * pmi;
            }
        }
        *out.entry_mut(xh, 0) = pi_next[xh];
        out.flush();
        Ok((out, x_hat))
    }

    /// One full monitor slot: condition on `o`, let the estimator see it, then propagate.
    pub fn update(
        &self,
        o: Observation,
        p: &TransitionMatrix,
        est: &mut Estimator,
    ) -> Result<(Belief, StateIndex)> {
        let hat = self.observe(o)?;
        est.record(o);
        hat.propagate(p, est)
    }

    fn flush(&mut self) {
        let mut flushed = false;
        for v in &mut self.mass {
            if *v < FLUSH_THRESHOLD {
                flushed |= *v != 0.0;
                *v = 0.0;
            }
        }
        let total = self.total();
        if flushed || (total - 1.0).abs() > f64::EPSILON * 8.0 {
            self.mass.iter_mut().for_each(|v| *v /= total);
        }
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, other: &Belief) -> f64 {
        self.mass.iter().zip(&other.mass).fold(0.0, |d, (a, b)| f64::max(d, (a - b).abs()))
    }

    /// Writes `state,delta,mass` rows, optionally prefixed by a slot column.
    pub fn write_csv<W: Write>(&self, w: &mut W, slot: Option<u64>, header: bool) -> io::Result<()> {
        if header {
            match slot {
                Some(_) => writeln!(w, "t,state,delta,mass")?,
                None => writeln!(w, "state,delta,mass")?,
            }
        }
        for i in 0..self.n {
            for d in 0..=self.delta_max {
                let m = self.get(i, d);
                match slot {
                    Some(t) => writeln!(w, "{t},{},{d},{m}", i + 1)?,
                    None => writeln!(w, "{},{d},{m}", i + 1)?,
                }
            }
        }
        Ok(())
    }
}

/// A possible next belief and the probability of reaching it.
#[derive(Debug, Clone)]
pub struct Successor {
    pub observation: Observation,
    pub probability: f64,
    pub belief: Belief,
    pub estimate: StateIndex,
    pub estimator: Estimator,
}

/// Exact distribution of the next belief given the current one and an action.
///
/// Without a pull there is one branch. With a pull, the sample equals state
/// `k` with the current marginal probability of `k`.
pub fn successor_distribution(
    b: &Belief,
    action: Action,
    p: &TransitionMatrix,
    est: &Estimator,
) -> Result<Vec<Successor>> {
    if !action.is_pull() {
        let (belief, estimate) = b.propagate(p, est)?;
        return Ok(vec![Successor { observation: Observation::Empty, probability: 1.0, belief, estimate, estimator: *est }]);
    }
    let pi = b.marginal();
    let mut out = Vec::with_capacity(b.n());
    for (k, &prob) in pi.iter().enumerate() {
        if prob <= FLUSH_THRESHOLD {
            continue;
        }
        let o = Observation::Delivered(StateIndex::from_zero_based(k));
        let mut e = *est;
        let (belief, estimate) = b.update(o, p, &mut e)?;
        out.push(Successor { observation: o, probability: prob, belief, estimate, estimator: e });
    }
    Ok(out)
}

/// Initial belief.
///
/// A known start is a point mass at age zero. A stationary start spreads the
/// stationary distribution (estimated state at age 0, the rest at age 1) and
/// runs the no-observation recursion under the MAP rule until it settles.
pub fn init_belief(p: &TransitionMatrix, delta_max: usize, start: Start) -> Result<Belief> {
    if delta_max < 1 {
        return Err(BeliefError::Invalid("delta_max must be at least 1".into()));
    }
    match start {
        Start::Known(s) => {
            if s.index() >= p.n() {
                return Err(BeliefError::Invalid(format!("start state {s} outside 1..={}", p.n())));
            }
            Ok(Belief::point_mass(p.n(), delta_max, s))
        }
        Start::Stationary => settle(stationary_seed(p, delta_max)?, p, &Estimator::map()),
    }
}

/// Fixed point of the no-observation recursion.
pub fn steady_state_belief(p: &TransitionMatrix, delta_max: usize, est: &Estimator) -> Result<Belief> {
    if delta_max < 1 {
        return Err(BeliefError::Invalid("delta_max must be at least 1".into()));
    }
    settle(stationary_seed(p, delta_max)?, p, est)
}

fn stationary_seed(p: &TransitionMatrix, delta_max: usize) -> Result<Belief> {
    let st = p.stationary()?;
    let top = argmax_smallest(&st).index();
    let mut b = Belief::zeros(p.n(), delta_max);
    for (i, &m) in st.iter().enumerate() {
        *b.entry_mut(i, if i == top { 0 } else { 1 }) = m;
    }
    Ok(b)
}

fn settle(mut b: Belief, p: &TransitionMatrix, est: &Estimator) -> Result<Belief> {
    for _ in 0..STEADY_STATE_MAX_ITERATIONS {
        let (next, _) = b.propagate(p, est)?;
        let diff = next.max_abs_diff(&b);
        b = next;
        if diff < STEADY_STATE_TOLERANCE {
            return Ok(b);
        }
    }
    Err(BeliefError::NoConvergence(STEADY_STATE_MAX_ITERATIONS))
}
