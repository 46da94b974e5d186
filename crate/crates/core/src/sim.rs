//! Ground-truth world and monitor run in lockstep.
//!
//! A slot `t` starts with the source in `X_t` and the monitor holding the
//! belief `b_t` together with its estimate. Within the slot the pull
//! decision is executed, the true AoII is accounted against the estimate,
//! the source steps, and the sample (if any) reaches the monitor, which
//! conditions and propagates to `b_{t+1}`. Cycled, this is the same event
//! order as delivering, updating, acting, accounting and stepping.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::belief::{self, Belief, Estimator, EstimatorKind, Observation};
use crate::chain::{StateIndex, TransitionMatrix};
use crate::rng::{seeded, RandomSource, POLICY_STREAM, SOURCE_STREAM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Wait,
    Pull,
}

impl Action {
    pub fn is_pull(self) -> bool {
        self == Action::Pull
    }

    pub fn as_u8(self) -> u8 {
        self.is_pull() as u8
    }

    pub fn index(self) -> usize {
        self.as_u8() as usize
    }

    pub fn from_bool(pull: bool) -> Self {
        if pull {
            Action::Pull
        } else {
            Action::Wait
        }
    }
}

/// Anything that can choose whether to pull in a slot.
pub trait PullPolicy {
    fn decide(&mut self, b: &Belief, t: u64, rng: &mut RandomSource) -> Action;
}

impl<F> PullPolicy for F
where
    F: FnMut(&Belief, u64, &mut RandomSource) -> Action,
{
    fn decide(&mut self, b: &Belief, t: u64, rng: &mut RandomSource) -> Action {
        self(b, t, rng)
    }
}

/// The source side.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub t: u64,
    pub x: StateIndex,
    /// True AoII, never capped.
    pub aoii: u64,
    /// Sample taken in the previous slot, delivered at the start of this one.
    pub inflight: Option<StateIndex>,
    pub rng: RandomSource,
}

impl WorldState {
    pub fn new(start: StateIndex, seed: u64) -> Self {
        Self { t: 0, x: start, aoii: 0, inflight: None, rng: seeded(seed, SOURCE_STREAM) }
    }
}

/// The monitor side: belief, estimator state and the current estimate.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub belief: Belief,
    pub estimator: Estimator,
    pub estimate: StateIndex,
}

impl Monitor {
    /// A monitor that knows the initial state.
    pub fn warm(n: usize, delta_max: usize, kind: EstimatorKind, start: StateIndex) -> Self {
        Self {
            belief: Belief::point_mass(n, delta_max, start),
            estimator: Estimator::warm(kind, start),
            estimate: start,
        }
    }

    pub fn receive(&mut self, o: Observation, p: &TransitionMatrix) -> belief::Result<()> {
        let (b, x_hat) = self.belief.update(o, p, &mut self.estimator)?;
        self.belief = b;
        self.estimate = x_hat;
        Ok(())
    }
}

/// One slot as seen from outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotRecord {
    pub t: u64,
    pub x: StateIndex,
    pub x_hat: StateIndex,
    pub aoii: u64,
    pub action: Action,
    pub expected_aoii: f64,
}

impl SlotRecord {
    pub const CSV_HEADER: &'static str = "t,x,x_hat,aoii,action,expected_aoii";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{},{},{},{},{},{}", self.t, self.x, self.x_hat, self.aoii, self.action.as_u8(), self.expected_aoii)
    }
}

/// Executes `action` for the current slot and advances both sides by one slot.
pub fn slot_step(
    world: &mut WorldState,
    monitor: &mut Monitor,
    action: Action,
    p: &TransitionMatrix,
) -> belief::Result<SlotRecord> {
    let expected_aoii = monitor.belief.expected_aoii();
    world.aoii = if world.x != monitor.estimate { world.aoii + 1 } else { 0 };
    let record = SlotRecord {
        t: world.t,
        x: world.x,
        x_hat: monitor.estimate,
        aoii: world.aoii,
        action,
        expected_aoii,
    };
    if action.is_pull() {
        world.inflight = Some(world.x);
    }
    world.x = p.step(world.x, &mut world.rng);
    world.t += 1;
    let o = match world.inflight.take() {
        Some(s) => Observation::Delivered(s),
        None => Observation::Empty,
    };
    monitor.receive(o, p)?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub sum_aoii: u64,
    pub sum_actions: u64,
    pub sum_expected_aoii: f64,
    pub slots: u64,
}

impl RunMetrics {
    pub fn record(&mut self, r: &SlotRecord) {
        self.sum_aoii += r.aoii;
        self.sum_actions += r.action.as_u8() as u64;
        self.sum_expected_aoii += r.expected_aoii;
        self.slots += 1;
    }

    /// Time-averaged true AoII.
    pub fn maoii(&self) -> f64 {
        assert!(self.slots > 0, "no slots recorded");
        self.sum_aoii as f64 / self.slots as f64
    }

    /// Fraction of slots with a pull.
    pub fn rate(&self) -> f64 {
        assert!(self.slots > 0, "no slots recorded");
        self.sum_actions as f64 / self.slots as f64
    }

    /// Time-averaged expected AoII under the belief.
    pub fn maoii_hat(&self) -> f64 {
        assert!(self.slots > 0, "no slots recorded");
        self.sum_expected_aoii / self.slots as f64
    }

    /// `MAoII + lambda * R`.
    pub fn lagrangian_cost(&self, lambda: f64) -> f64 {
        self.maoii() + lambda * self.rate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub delta_max: usize,
    pub horizon: u64,
    pub estimator: EstimatorKind,
    pub start: StateIndex,
    /// Slots excluded from the metrics at the beginning of the run.
    pub warmup: u64,
}

/// Slots skipped when warm-up exclusion is switched on.
pub const DEFAULT_WARMUP: u64 = 1_000;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            delta_max: 15,
            horizon: 100_000,
            estimator: EstimatorKind::Map,
            start: StateIndex::new(1).expect("1 is a state"),
            warmup: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Option<Vec<SlotRecord>>,
}

/// Drives `cfg.horizon` slots of `policy` from a warm start.
pub fn run<P: PullPolicy + ?Sized>(
    policy: &mut P,
    p: &TransitionMatrix,
    cfg: &RunConfig,
    seed: u64,
    keep_trace: bool,
) -> belief::Result<RunOutput> {
    run_observed(policy, p, cfg, seed, keep_trace, |_, _| {})
}

/// Like [`run`] but calls `observe` with every record and the monitor state after it.
pub fn run_observed<P, O>(
    policy: &mut P,
    p: &TransitionMatrix,
    cfg: &RunConfig,
    seed: u64,
    keep_trace: bool,
    mut observe: O,
) -> belief::Result<RunOutput>
where
    P: PullPolicy + ?Sized,
    O: FnMut(&SlotRecord, &Monitor),
{
    if cfg.start.index() >= p.n() {
        return Err(belief::BeliefError::Invalid(format!("start state {} outside 1..={}", cfg.start, p.n())));
    }
    let mut world = WorldState::new(cfg.start, seed);
    let mut monitor = Monitor::warm(p.n(), cfg.delta_max, cfg.estimator, cfg.start);
    let mut policy_rng = seeded(seed, POLICY_STREAM);
    let mut metrics = RunMetrics::default();
    let mut trace = keep_trace.then(|| Vec::with_capacity(cfg.horizon.min(1 << 20) as usize));
    for _ in 0..cfg.horizon {
        let action = policy.decide(&monitor.belief, world.t, &mut policy_rng);
        let record = slot_step(&mut world, &mut monitor, action, p)?;
        if record.t >= cfg.warmup {
            metrics.record(&record);
        }
        observe(&record, &monitor);
        if let Some(tr) = trace.as_mut() {
            tr.push(record);
        }
    }
    Ok(RunOutput { metrics, trace })
}
