//! Pull policies and the searches that tune them to a sampling budget.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::belief::{steady_state_belief, Belief, BeliefError, Estimator};
use crate::chain::TransitionMatrix;
use crate::dqn::{DqnError, ValueNetwork};
use crate::par::{self, Execution};
use crate::rng::RandomSource;
use crate::sim::{self, Action, PullPolicy, RunConfig, RunMetrics};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("budget {alpha} is outside the achievable rate range [{min_rate}, {max_rate}]")]
    BracketFailure { alpha: f64, min_rate: f64, max_rate: f64 },
    #[error("invalid policy parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone)]
pub enum PolicyKind {
    NeverPull,
    AlwaysPull,
    /// Pull with probability `alpha` in every slot.
    Random { alpha: f64 },
    /// The `m`-th pull happens at slot `round(m / alpha)`.
    Uniform { alpha: f64 },
    /// Pull when the expected AoII reaches `tau`.
    Threshold { tau: f64 },
    /// Greedy action of a trained value network.
    Learned(Arc<ValueNetwork>),
    /// Switches between two policies so the running rate tracks `alpha`.
    Steered { minus: Box<PolicyKind>, plus: Box<PolicyKind>, alpha: f64 },
}

impl PolicyKind {
    pub fn steered(minus: PolicyKind, plus: PolicyKind, alpha: f64) -> Self {
        PolicyKind::Steered { minus: Box::new(minus), plus: Box::new(plus), alpha }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyKind::Random { alpha } | PolicyKind::Uniform { alpha } if !(0.0..=1.0).contains(alpha) => {
                Err(PolicyError::Invalid(format!("alpha {alpha} outside [0, 1]")))
            }
            PolicyKind::Threshold { tau } if !(*tau >= 0.0) => {
                Err(PolicyError::Invalid(format!("threshold {tau} is negative")))
            }
            PolicyKind::Steered { minus, plus, alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(PolicyError::Invalid(format!("alpha {alpha} outside [0, 1]")));
                }
                minus.validate()?;
                plus.validate()
            }
            _ => Ok(()),
        }
    }

    /// Decision for slot `t`. Only `Steered` reads or writes `steering`.
    pub fn decide(&self, b: &Belief, t: u64, steering: &mut SteeringState, rng: &mut RandomSource) -> Action {
        match self {
            PolicyKind::NeverPull => Action::Wait,
            PolicyKind::AlwaysPull => Action::Pull,
            PolicyKind::Random { alpha } => Action::from_bool(rng.gen::<f64>() < *alpha),
            PolicyKind::Uniform { alpha } => Action::from_bool(uniform_pulls_at(*alpha, t)),
            PolicyKind::Threshold { tau } => Action::from_bool(b.expected_aoii() >= *tau),
            PolicyKind::Learned(net) => net.greedy(b).expect("network input matches the belief shape"),
            PolicyKind::Steered { minus, plus, alpha } => {
                let inner = if steering.running_rate() < *alpha { plus } else { minus };
                let a = inner.decide(b, t, &mut SteeringState::default(), rng);
                steering.record(a);
                a
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::NeverPull => "never",
            PolicyKind::AlwaysPull => "always",
            PolicyKind::Random { .. } => "random",
            PolicyKind::Uniform { .. } => "uniform",
            PolicyKind::Threshold { .. } => "threshold",
            PolicyKind::Learned(_) => "dqn",
            PolicyKind::Steered { .. } => "steered",
        }
    }

    fn check_shape(&self, n: usize, delta_max: usize) -> Result<()> {
        match self {
            PolicyKind::Learned(net) if net.input_size() != n * (delta_max + 1) => Err(PolicyError::Dqn(
                DqnError::InputSize { got: n * (delta_max + 1), expected: net.input_size() },
            )),
            PolicyKind::Steered { minus, plus, .. } => {
                minus.check_shape(n, delta_max)?;
                plus.check_shape(n, delta_max)
            }
            _ => Ok(()),
        }
    }
}

/// Whether slot `t` equals `round(m / alpha)` for some `m >= 1`, rounding halves up.
pub fn uniform_pulls_at(alpha: f64, t: u64) -> bool {
    if !(alpha > 0.0) || t == 0 {
        return false;
    }
    let guess = (t as f64 * alpha).round() as i64;
    (guess - 1..=guess + 1).filter(|&m| m >= 1).any(|m| (m as f64 / alpha + 0.5).floor() == t as f64)
}

/// Running pull count of a steered run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SteeringState {
    pub pulls_so_far: u64,
    pub slots_so_far: u64,
}

impl SteeringState {
    pub fn running_rate(&self) -> f64 {
        if self.slots_so_far == 0 {
            0.0
        } else {
            self.pulls_so_far as f64 / self.slots_so_far as f64
        }
    }

    pub fn record(&mut self, a: Action) {
        self.pulls_so_far += a.as_u8() as u64;
        self.slots_so_far += 1;
    }
}

/// A policy bound to the per-run state it needs.
pub struct PolicyRunner<'a> {
    pub kind: &'a PolicyKind,
    pub steering: SteeringState,
}

impl<'a> PolicyRunner<'a> {
    pub fn new(kind: &'a PolicyKind) -> Self {
        Self { kind, steering: SteeringState::default() }
    }
}

impl PullPolicy for PolicyRunner<'_> {
    fn decide(&mut self, b: &Belief, t: u64, rng: &mut RandomSource) -> Action {
        self.kind.decide(b, t, &mut self.steering, rng)
    }
}

/// Runs `policy` once and returns its metrics.
pub fn simulate(policy: &PolicyKind, p: &TransitionMatrix, cfg: &RunConfig, seed: u64) -> Result<RunMetrics> {
    policy.validate()?;
    policy.check_shape(p.n(), cfg.delta_max)?;
    let mut runner = PolicyRunner::new(policy);
    Ok(sim::run(&mut runner, p, cfg, seed, false)?.metrics)
}

/// Seed-averaged pull rate.
pub fn mean_rate(policy: &PolicyKind, p: &TransitionMatrix, cfg: &RunConfig, seeds: &[u64], exec: Execution) -> Result<f64> {
    let rates = par::map(seeds.to_vec(), exec, |s| simulate(policy, p, cfg, s).map(|m| m.rate()));
    let rates: Vec<f64> = rates.into_iter().collect::<Result<_>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Runs the steered mixture of `minus` and `plus`.
pub fn steering_run(
    minus: &PolicyKind,
    plus: &PolicyKind,
    alpha: f64,
    p: &TransitionMatrix,
    cfg: &RunConfig,
    seed: u64,
) -> Result<RunMetrics> {
    simulate(&PolicyKind::steered(minus.clone(), plus.clone(), alpha), p, cfg, seed)
}

/// Width of the threshold bracket at which bisection stops.
pub const THRESHOLD_BRACKET_WIDTH: f64 = 1e-3;
/// Rate slack on either side of the budget at which bisection stops.
pub const RATE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdBracket {
    /// Larger threshold; its rate is at most the budget.
    pub tau_minus: f64,
    /// Smaller threshold; its rate is at least the budget.
    pub tau_plus: f64,
    pub rate_minus: f64,
    pub rate_plus: f64,
    /// Every `(tau, rate)` pair that was simulated.
    pub evaluations: Vec<(f64, f64)>,
}

impl ThresholdBracket {
    pub fn policies(&self) -> (PolicyKind, PolicyKind) {
        (PolicyKind::Threshold { tau: self.tau_minus }, PolicyKind::Threshold { tau: self.tau_plus })
    }
}

/// Bisection for thresholds whose simulated rates bracket `alpha`.
///
/// The search runs over `[0, r(b_st, 0)]`, the span between pulling always
/// and never pulling after burn-in. Rates are averaged over `seeds`.
pub fn calibrate_threshold(
    p: &TransitionMatrix,
    est: &Estimator,
    alpha: f64,
    cfg: &RunConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<ThresholdBracket> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PolicyError::Invalid(format!("budget {alpha} outside (0, 1)")));
    }
    if seeds.is_empty() {
        return Err(PolicyError::Invalid("no calibration seeds".into()));
    }
    let cap = steady_state_belief(p, cfg.delta_max, est)?.expected_aoii();
    let mut evaluations = Vec::new();
    let mut rate_at = |tau: f64| -> Result<f64> {
        let r = mean_rate(&PolicyKind::Threshold { tau }, p, cfg, seeds, exec)?;
        evaluations.push((tau, r));
        Ok(r)
    };

    let (mut lo, mut hi) = (0.0, cap);
    let (mut r_lo, mut r_hi) = (rate_at(lo)?, rate_at(hi)?);
    if alpha > r_lo || alpha < r_hi {
        return Err(PolicyError::BracketFailure { alpha, min_rate: r_hi, max_rate: r_lo });
    }
    for (tau, r) in [(lo, r_lo), (hi, r_hi)] {
        if r == alpha {
            return Ok(ThresholdBracket { tau_minus: tau, tau_plus: tau, rate_minus: r, rate_plus: r, evaluations });
        }
    }
    while hi - lo >= THRESHOLD_BRACKET_WIDTH && (r_lo - alpha > RATE_TOLERANCE || alpha - r_hi > RATE_TOLERANCE) {
        let mid = 0.5 * (lo + hi);
        let r = rate_at(mid)?;
        if r == alpha {
            return Ok(ThresholdBracket { tau_minus: mid, tau_plus: mid, rate_minus: r, rate_plus: r, evaluations });
        }
        if r > alpha {
            lo = mid;
            r_lo = r;
        } else {
            hi = mid;
            r_hi = r;
        }
    }
    Ok(ThresholdBracket { tau_minus: hi, tau_plus: lo, rate_minus: r_hi, rate_plus: r_lo, evaluations })
}

/// Pool-adjacent-violators fit of a nonincreasing sequence (equal weights).
pub fn isotonic_nonincreasing(values: &[f64]) -> Vec<f64> {
    // blocks of (mean, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb));
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

/// Default Lagrange multipliers tried for the learned policy.
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];
/// Upper bound on trainings per sweep, refinements included.
pub const MAX_LAMBDA_TRAININGS: usize = 12;

#[derive(Debug, Clone, Serialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub rate: f64,
    pub smoothed_rate: f64,
    pub maoii: f64,
    #[serde(skip)]
    pub policy: PolicyKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaBracket {
    /// Larger multiplier, lower rate.
    pub lambda_minus: f64,
    /// Smaller multiplier, higher rate.
    pub lambda_plus: f64,
    pub rate_minus: f64,
    pub rate_plus: f64,
    #[serde(skip)]
    pub minus: PolicyKind,
    #[serde(skip)]
    pub plus: PolicyKind,
}

/// Learned policies over a grid of multipliers with their measured rates.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LambdaSweep {
    pub points: Vec<LambdaPoint>,
}

impl LambdaSweep {
    /// Trains and measures one policy per grid value.
    pub fn build<T, M>(grid: &[f64], train: &T, measure: &M, exec: Execution) -> Result<Self>
    where
        T: Fn(f64) -> Result<PolicyKind> + Sync,
        M: Fn(&PolicyKind) -> Result<RunMetrics> + Sync,
    {
        if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] < 0.0 {
            return Err(PolicyError::Invalid("lambda grid must be nonnegative and strictly ascending".into()));
        }
        let mut sweep = Self::default();
        sweep.add(grid, train, measure, exec)?;
        Ok(sweep)
    }

    fn add<T, M>(&mut self, lambdas: &[f64], train: &T, measure: &M, exec: Execution) -> Result<()>
    where
        T: Fn(f64) -> Result<PolicyKind> + Sync,
        M: Fn(&PolicyKind) -> Result<RunMetrics> + Sync,
    {
        let fresh = par::map(lambdas.to_vec(), exec, |lambda| -> Result<LambdaPoint> {
            let policy = train(lambda)?;
            let m = measure(&policy)?;
            Ok(LambdaPoint { lambda, rate: m.rate(), smoothed_rate: m.rate(), maoii: m.maoii(), policy })
        });
        for p in fresh {
            self.points.push(p?);
        }
        self.points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let raw: Vec<f64> = self.points.iter().map(|p| p.rate).collect();
        for (p, s) in self.points.iter_mut().zip(isotonic_nonincreasing(&raw)) {
            p.smoothed_rate = s;
        }
        Ok(())
    }

    /// Adjacent pair whose smoothed rates bracket `alpha`.
    pub fn bracket(&self, alpha: f64) -> Result<LambdaBracket> {
        let pts = &self.points;
        let failure = || PolicyError::BracketFailure {
            alpha,
            min_rate: pts.last().map_or(f64::NAN, |p| p.smoothed_rate),
            max_rate: pts.first().map_or(f64::NAN, |p| p.smoothed_rate),
        };
        if pts.len() < 2 {
            return Err(failure());
        }
        let i = (0..pts.len() - 1)
            .find(|&i| pts[i].smoothed_rate >= alpha && alpha >= pts[i + 1].smoothed_rate)
            .ok_or_else(failure)?;
        let (plus, minus) = (&pts[i], &pts[i + 1]);
        Ok(LambdaBracket {
            lambda_minus: minus.lambda,
            lambda_plus: plus.lambda,
            rate_minus: minus.smoothed_rate,
            rate_plus: plus.smoothed_rate,
            minus: minus.policy.clone(),
            plus: plus.policy.clone(),
        })
    }

    /// One refinement pass: trains the midpoint of the current bracket for
    /// each budget, while the total stays within [`MAX_LAMBDA_TRAININGS`].
    pub fn refine<T, M>(&mut self, alphas: &[f64], train: &T, measure: &M, exec: Execution) -> Result<()>
    where
        T: Fn(f64) -> Result<PolicyKind> + Sync,
        M: Fn(&PolicyKind) -> Result<RunMetrics> + Sync,
    {
        let mut mids: Vec<f64> = Vec::new();
        for &alpha in alphas {
            if let Ok(b) = self.bracket(alpha) {
                let mid = 0.5 * (b.lambda_minus + b.lambda_plus);
                let known = self.points.iter().any(|p| p.lambda == mid) || mids.contains(&mid);
                if !known && b.lambda_minus != b.lambda_plus {
                    mids.push(mid);
                }
            }
        }
        mids.truncate(MAX_LAMBDA_TRAININGS.saturating_sub(self.points.len()));
        if mids.is_empty() {
            return Ok(());
        }
        self.add(&mids, train, measure, exec)
    }
}

/// Trains over the grid, refines once around the bracket and returns
/// `(phi_minus, phi_plus)` with `R(phi_minus) <= alpha <= R(phi_plus)`.
pub fn calibrate_lambda<T, M>(
    train: &T,
    measure: &M,
    alpha: f64,
    grid: &[f64],
    exec: Execution,
) -> Result<(LambdaBracket, LambdaSweep)>
where
    T: Fn(f64) -> Result<PolicyKind> + Sync,
    M: Fn(&PolicyKind) -> Result<RunMetrics> + Sync,
{
    let mut sweep = LambdaSweep::build(grid, train, measure, exec)?;
    sweep.bracket(alpha)?;
    sweep.refine(&[alpha], train, measure, exec)?;
    Ok((sweep.bracket(alpha)?, sweep))
}
