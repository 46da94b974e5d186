//! Brute-force reference for the belief recursion on tiny instances.
//!
//! Every source trajectory over the horizon is enumerated, the estimate
//! sequence is recomputed from the exact conditional state distribution of
//! each observation history, and the AoII is tracked per trajectory. The
//! joint distribution of state and age given each history then follows by
//! direct summation. Nothing here calls into the recursive update.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::belief::{Belief, BeliefError, Estimator, EstimatorKind, Observation, TIE_TOLERANCE};
use crate::chain::{StateIndex, TransitionMatrix};
use crate::sim::Action;

pub const MAX_HORIZON: usize = 12;
pub const MAX_STATES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("horizon {0} exceeds {MAX_HORIZON}")]
    HorizonTooLarge(usize),
    #[error("{0} states exceed {MAX_STATES}")]
    TooManyStates(usize),
    #[error("sequences differ in shape: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// How ages beyond the belief's last column are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeCap {
    /// Ages saturate at this value, as in the belief.
    Saturate(usize),
    /// Exact ages; the returned beliefs are as wide as the horizon needs.
    Uncapped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    /// 0-based states `X_0..=X_h`.
    pub states: Vec<usize>,
    pub probability: f64,
    /// Age at every slot, after the cap.
    pub aoii: Vec<usize>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryTable {
    pub horizon: usize,
    pub entries: Vec<TrajectoryEntry>,
}

/// Enumerates all trajectories from `start` under the fixed action sequence.
pub fn trajectory_table(
    p: &TransitionMatrix,
    start: StateIndex,
    actions: &[Action],
    est: EstimatorKind,
    cap: AgeCap,
) -> Result<TrajectoryTable> {
    let h = actions.len();
    if h > MAX_HORIZON {
        return Err(OracleError::HorizonTooLarge(h));
    }
    let n = p.n();
    if n > MAX_STATES {
        return Err(OracleError::TooManyStates(n));
    }
    let age_limit = match cap {
        AgeCap::Saturate(d) => d,
        AgeCap::Uncapped => usize::MAX,
    };

    let mut paths: Vec<(Vec<usize>, f64)> = vec![(vec![start.index()], 1.0)];
    for _ in 0..h {
        let mut next = Vec::with_capacity(paths.len() * n);
        for (path, prob) in &paths {
            let last = *path.last().expect("paths start nonempty");
            for j in 0..n {
                let q = p.get(last, j);
                if q > 0.0 {
                    let mut extended = path.clone();
                    extended.push(j);
                    next.push((extended, prob * q));
                }
            }
        }
        paths = next;
    }

    let observations: Vec<Vec<Observation>> = paths
        .iter()
        .map(|(states, _)| {
            (1..=h)
                .map(|t| match actions[t - 1] {
                    Action::Pull => Observation::Delivered(StateIndex::from_zero_based(states[t - 1])),
                    Action::Wait => Observation::Empty,
                })
                .collect()
        })
        .collect();

    // estimate per (slot, history prefix), from the exact conditional law of X_t
    let mut estimates: Vec<BTreeMap<&[Observation], usize>> = Vec::with_capacity(h + 1);
    for t in 0..=h {
        let mut marginals: BTreeMap<&[Observation], Vec<f64>> = BTreeMap::new();
        for ((states, prob), obs) in paths.iter().zip(&observations) {
            marginals.entry(&obs[..t]).or_insert_with(|| vec![0.0; n])[states[t]] += prob;
        }
        let est_t = marginals
            .into_iter()
            .map(|(hist, m)| {
                let x_hat = match est {
                    EstimatorKind::Map => first_maximum(&m),
                    EstimatorKind::Martingale => hist
                        .iter()
                        .rev()
                        .find_map(|o| match o {
                            Observation::Delivered(s) => Some(s.index()),
                            Observation::Empty => None,
                        })
                        .unwrap_or(start.index()),
                };
                (hist, x_hat)
            })
            .collect();
        estimates.push(est_t);
    }

    let entries = paths
        .iter()
        .zip(&observations)
        .map(|((states, prob), obs)| {
            let mut aoii = Vec::with_capacity(h + 1);
            let mut age = 0usize;
            for t in 0..=h {
                let x_hat = estimates[t][&obs[..t]];
                age = if states[t] != x_hat { age.saturating_add(1).min(age_limit) } else { 0 };
                aoii.push(age);
            }
            TrajectoryEntry { states: states.clone(), probability: *prob, aoii, observations: obs.clone() }
        })
        .collect();
    Ok(TrajectoryTable { horizon: h, entries })
}

fn first_maximum(m: &[f64]) -> usize {
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = max - TIE_TOLERANCE * max.abs().max(1.0);
    m.iter().position(|&v| v >= cutoff).expect("nonempty marginal")
}

/// Exact belief after one observation history.
#[derive(Debug, Clone)]
pub struct Branch {
    pub history: Vec<Observation>,
    /// Probability of observing this history.
    pub probability: f64,
    pub belief: Belief,
}

/// Per-slot exact beliefs, one entry per realizable history of length `t`.
pub fn enumerate(
    p: &TransitionMatrix,
    start: StateIndex,
    actions: &[Action],
    est: EstimatorKind,
    cap: AgeCap,
) -> Result<Vec<Vec<Branch>>> {
    let table = trajectory_table(p, start, actions, est, cap)?;
    let h = table.horizon;
    let width = match cap {
        AgeCap::Saturate(d) => d,
        AgeCap::Uncapped => h,
    };
    let n = p.n();
    let mut slots = Vec::with_capacity(h + 1);
    for t in 0..=h {
        let mut groups: BTreeMap<&[Observation], (f64, Vec<f64>)> = BTreeMap::new();
        for e in &table.entries {
            let g = groups.entry(&e.observations[..t]).or_insert_with(|| (0.0, vec![0.0; n * (width + 1)]));
            g.0 += e.probability;
            g.1[e.states[t] * (width + 1) + e.aoii[t]] += e.probability;
        }
        let branches = groups
            .into_iter()
            .map(|(hist, (prob, mut mass))| {
                mass.iter_mut().for_each(|m| *m /= prob);
                Ok(Branch { history: hist.to_vec(), probability: prob, belief: Belief::from_flat(n, width, mass)? })
            })
            .collect::<Result<Vec<_>>>()?;
        slots.push(branches);
    }
    Ok(slots)
}

/// Replays a history through the recursive update from a known start.
pub fn replay(
    p: &TransitionMatrix,
    start: StateIndex,
    history: &[Observation],
    est: EstimatorKind,
    delta_max: usize,
) -> Result<Vec<Belief>> {
    let mut b = Belief::point_mass(p.n(), delta_max, start);
    let mut e = Estimator::warm(est, start);
    let mut out = vec![b.clone()];
    for &o in history {
        b = b.update(o, p, &mut e)?.0;
        out.push(b.clone());
    }
    Ok(out)
}

/// Largest absolute entry difference across two belief sequences.
pub fn compare(exact: &[Belief], recursive: &[Belief]) -> Result<f64> {
    if exact.len() != recursive.len() {
        return Err(OracleError::ShapeMismatch(format!("{} vs {} slots", exact.len(), recursive.len())));
    }
    let mut worst = 0.0f64;
    for (t, (a, b)) in exact.iter().zip(recursive).enumerate() {
        if a.n() != b.n() || a.delta_max() != b.delta_max() {
            return Err(OracleError::ShapeMismatch(format!(
                "slot {t}: {}x{} vs {}x{}",
                a.n(),
                a.width(),
                b.n(),
                b.width()
            )));
        }
        worst = worst.max(a.max_abs_diff(b));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Certification {
    /// Worst belief entry error over all slots and branches.
    pub belief_error: f64,
    /// Worst gap between enumerated observation probabilities and the recursion's marginals.
    pub observation_error: f64,
    pub branches: usize,
}

/// Checks the recursion against enumeration for one action sequence.
pub fn certify(
    p: &TransitionMatrix,
    start: StateIndex,
    actions: &[Action],
    est: EstimatorKind,
    delta_max: usize,
) -> Result<Certification> {
    let exact = enumerate(p, start, actions, est, AgeCap::Saturate(delta_max))?;
    let h = actions.len();
    let mut cert = Certification::default();
    for leaf in &exact[h] {
        let recursive = replay(p, start, &leaf.history, est, delta_max)?;
        let along: Vec<Belief> = (0..=h)
            .map(|t| {
                exact[t]
                    .iter()
                    .find(|b| b.history[..] == leaf.history[..t])
                    .expect("every prefix of a realized history is realized")
                    .belief
                    .clone()
            })
            .collect();
        cert.belief_error = cert.belief_error.max(compare(&along, &recursive)?);
        cert.branches += 1;
    }
    for t in 0..h {
        if !actions[t].is_pull() {
            continue;
        }
        for parent in &exact[t] {
            let recursive = replay(p, start, &parent.history, est, delta_max)?;
            let pi = recursive[t].marginal();
            for child in exact[t + 1].iter().filter(|c| c.history[..t] == parent.history[..]) {
                if let Observation::Delivered(k) = child.history[t] {
                    let conditional = child.probability / parent.probability;
                    cert.observation_error = cert.observation_error.max((conditional - pi[k.index()]).abs());
                }
            }
        }
    }
    Ok(cert)
}
