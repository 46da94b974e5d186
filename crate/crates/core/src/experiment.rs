//! Config-driven sweeps over sampling budgets and seeded single-run traces.
//!
//! A sweep produces one row per (policy, estimator, budget, seed). Policies
//! that need calibration are calibrated once per (estimator, budget) and
//! then run under steering; the learned policy shares one λ sweep across
//! all budgets of an estimator.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{BeliefError, EstimatorKind, Observation};
use crate::chain::{ChainError, StateIndex, TransitionMatrix};
use crate::dqn::{self, TrainConfig, TrainingReport, ValueNetwork};
use crate::par::{self, Execution};
use crate::policy::{self, LambdaSweep, PolicyError, PolicyKind, PolicyRunner, DEFAULT_LAMBDA_GRID};
use crate::sim::{self, Action, Monitor, PullPolicy, RunConfig, RunMetrics, WorldState, DEFAULT_WARMUP};

/// First line of every CSV file written here.
pub const CSV_VERSION_LINE: &str = "# aoii-lab v1";
/// Longest trace that may be requested.
pub const MAX_TRACE_HORIZON: u64 = 1_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl ExperimentError {
    /// Whether the error comes from the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Json(_) | ExperimentError::Chain(_))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Policies a sweep can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Never,
    Always,
    Random,
    Uniform,
    Threshold,
    Dqn,
}

impl PolicyName {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Never => "never",
            PolicyName::Always => "always",
            PolicyName::Random => "random",
            PolicyName::Uniform => "uniform",
            PolicyName::Threshold => "threshold",
            PolicyName::Dqn => "dqn",
        }
    }
}

/// Pull schedule of a trace run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TracePolicy {
    /// Pull exactly at the listed slots.
    Slots { slots: Vec<u64> },
    Never,
    Always,
    Random { alpha: f64 },
    Uniform { alpha: f64 },
    Threshold { tau: f64 },
}

impl Default for TracePolicy {
    fn default() -> Self {
        TracePolicy::Slots { slots: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    #[serde(default = "default_trace_horizon")]
    pub horizon: u64,
    /// Defaults to the first sweep seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Defaults to the first sweep estimator.
    #[serde(default)]
    pub estimator: Option<EstimatorKind>,
    #[serde(default)]
    pub policy: TracePolicy,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { horizon: default_trace_horizon(), seed: None, estimator: None, policy: TracePolicy::default() }
    }
}

fn default_trace_horizon() -> u64 {
    50
}

fn default_delta_max() -> usize {
    15
}

fn default_horizon() -> u64 {
    100_000
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Map]
}

fn default_start() -> usize {
    1
}

fn default_calibration_seeds() -> Vec<u64> {
    vec![1_000_001, 1_000_002, 1_000_003]
}

fn default_lambda_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

/// One experiment, read from a single JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Transition matrix rows.
    pub matrix: Vec<Vec<f64>>,
    #[serde(default = "default_delta_max")]
    pub delta_max: usize,
    /// Slots per run.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    pub policies: Vec<PolicyName>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Known initial state, 1-based.
    #[serde(default = "default_start")]
    pub start: usize,
    /// Leave the first 10^3 slots of every run out of the metrics.
    #[serde(default)]
    pub warmup: bool,
    /// Seeds for the rate measurements behind threshold and λ calibration.
    #[serde(default = "default_calibration_seeds")]
    pub calibration_seeds: Vec<u64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Overrides for the learned policy; `delta_max` and `lambda` are set by the sweep.
    #[serde(default)]
    pub dqn: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub trace: Option<TraceConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn transition_matrix(&self) -> Result<TransitionMatrix> {
        Ok(TransitionMatrix::from_rows(self.matrix.clone())?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let p = self.transition_matrix()?;
        if self.policies.is_empty() {
            return bad("policy list is empty".into());
        }
        if self.estimators.is_empty() {
            return bad("estimator list is empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.alphas.is_empty() {
            return bad("alpha grid is empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        if self.delta_max == 0 {
            return bad("delta_max must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.warmup && self.horizon <= DEFAULT_WARMUP {
            return bad(format!("warm-up exclusion needs a horizon above {DEFAULT_WARMUP}"));
        }
        if self.start == 0 || self.start > p.n() {
            return bad(format!("start state {} outside 1..={}", self.start, p.n()));
        }
        if self.calibration_seeds.is_empty() {
            return bad("calibration seed list is empty".into());
        }
        let grid = &self.lambda_grid;
        if grid.len() < 2 || grid[0] < 0.0 || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("lambda grid needs two or more nonnegative, strictly ascending values".into());
        }
        self.dqn.validate().map_err(ExperimentError::Config)?;
        if self.dqn.restarts == 0 {
            return bad("dqn.restarts must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if let Some(t) = &self.trace {
            self.check_trace(t)?;
        }
        Ok(())
    }

    fn check_trace(&self, t: &TraceConfig) -> Result<()> {
        if t.horizon == 0 || t.horizon > MAX_TRACE_HORIZON {
            return Err(ExperimentError::Config(format!("trace horizon {} outside 1..={MAX_TRACE_HORIZON}", t.horizon)));
        }
        let rate_ok = |a: f64| (0.0..=1.0).contains(&a);
        match &t.policy {
            TracePolicy::Random { alpha } | TracePolicy::Uniform { alpha } if !rate_ok(*alpha) => {
                Err(ExperimentError::Config(format!("trace alpha {alpha} outside [0, 1]")))
            }
            TracePolicy::Threshold { tau } if !(*tau >= 0.0) => {
                Err(ExperimentError::Config(format!("trace threshold {tau} is negative")))
            }
            _ => Ok(()),
        }
    }

    fn run_config(&self, estimator: EstimatorKind) -> RunConfig {
        RunConfig {
            delta_max: self.delta_max,
            horizon: self.horizon,
            estimator,
            start: StateIndex::new(self.start).expect("validated start"),
            warmup: if self.warmup { DEFAULT_WARMUP } else { 0 },
        }
    }

    fn train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig { lambda, delta_max: self.delta_max, ..self.dqn.clone() }
    }

    fn restart_seeds(&self) -> Vec<u64> {
        (1..=self.dqn.restarts as u64).collect()
    }
}

/// Calibration attached to a steered row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    /// τ⁻ or λ⁻: the parameter of the lower-rate policy.
    pub param_minus: f64,
    /// τ⁺ or λ⁺.
    pub param_plus: f64,
    pub rate_minus: f64,
    pub rate_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RowStatus {
    Ok,
    BracketFailure,
    Failed(String),
}

impl RowStatus {
    fn label(&self) -> &str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::BracketFailure => "bracket_failure",
            RowStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub policy: PolicyName,
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub status: RowStatus,
    pub bracket: Option<Bracket>,
}

impl ResultRow {
    pub const CSV_HEADER: &'static str =
        "policy,estimator,alpha,seed,maoii,rate,maoii_hat,status,param_minus,param_plus,rate_minus,rate_plus";

    fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "{},{},{},{},", self.policy.as_str(), self.estimator, self.alpha, self.seed)?;
        match &self.metrics {
            Some(m) => write!(w, "{},{},{},", m.maoii(), m.rate(), m.maoii_hat())?,
            None => write!(w, ",,,")?,
        }
        write!(w, "{}", self.status.label())?;
        match &self.bracket {
            Some(b) => writeln!(w, ",{},{},{},{}", b.param_minus, b.param_plus, b.rate_minus, b.rate_plus),
            None => writeln!(w, ",,,,"),
        }
    }
}

/// Seed-averaged view of one (policy, estimator, budget) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub policy: PolicyName,
    pub estimator: EstimatorKind,
    pub alpha: f64,
    /// Successful runs in the cell.
    pub runs: usize,
    pub maoii_mean: f64,
    pub maoii_se: f64,
    pub rate_mean: f64,
    pub rate_se: f64,
    pub maoii_hat_mean: f64,
    pub maoii_hat_se: f64,
}

impl AggregateRow {
    pub const CSV_HEADER: &'static str =
        "policy,estimator,alpha,runs,maoii_mean,maoii_se,rate_mean,rate_se,maoii_hat_mean,maoii_hat_se";

    fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            self.policy.as_str(),
            self.estimator,
            self.alpha,
            self.runs,
            self.maoii_mean,
            self.maoii_se,
            self.rate_mean,
            self.rate_se,
            self.maoii_hat_mean,
            self.maoii_hat_se
        )
    }
}

/// Sample mean and standard error of the mean (zero for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Groups rows by (policy, estimator, alpha), skipping rows without metrics.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(PolicyName, EstimatorKind, u64), Vec<&RunMetrics>> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.policy, r.estimator, r.alpha.to_bits())).or_default();
        if let Some(m) = &r.metrics {
            g.push(m);
        }
    }
    groups
        .into_iter()
        .map(|((policy, estimator, alpha), ms)| {
            let col = |f: fn(&RunMetrics) -> f64| mean_and_se(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
            let (maoii_mean, maoii_se) = col(RunMetrics::maoii);
            let (rate_mean, rate_se) = col(RunMetrics::rate);
            let (maoii_hat_mean, maoii_hat_se) = col(RunMetrics::maoii_hat);
            AggregateRow {
                policy,
                estimator,
                alpha: f64::from_bits(alpha),
                runs: ms.len(),
                maoii_mean,
                maoii_se,
                rate_mean,
                rate_se,
                maoii_hat_mean,
                maoii_hat_se,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdCalibration {
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub bracket: Option<policy::ThresholdBracket>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaCalibration {
    pub estimator: EstimatorKind,
    pub sweep: Option<LambdaSweep>,
    pub brackets: Vec<(f64, Option<policy::LambdaBracket>)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CalibrationReport {
    pub thresholds: Vec<ThresholdCalibration>,
    pub lambdas: Vec<LambdaCalibration>,
}

/// A trained network kept for output.
#[derive(Debug, Clone)]
pub struct SavedNetwork {
    pub estimator: EstimatorKind,
    pub lambda: f64,
    pub network: Arc<ValueNetwork>,
    pub report: Option<TrainingReport>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    /// Sorted by (policy, estimator, alpha, seed).
    pub rows: Vec<ResultRow>,
    pub calibration: CalibrationReport,
    pub networks: Vec<SavedNetwork>,
}

impl SweepOutput {
    /// Rows that did not produce metrics.
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != RowStatus::Ok).count()
    }
}

/// Steered pair or failure for one (estimator, budget).
type Calibrated = std::result::Result<(PolicyKind, PolicyKind, Bracket), RowStatus>;

fn failure_status(e: &PolicyError) -> RowStatus {
    match e {
        PolicyError::BracketFailure { .. } => RowStatus::BracketFailure,
        other => RowStatus::Failed(other.to_string()),
    }
}

/// Runs every (policy, estimator, alpha, seed) cell of the config.
pub fn run_sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<SweepOutput> {
    cfg.validate()?;
    let p = cfg.transition_matrix()?;
    let mut out = SweepOutput::default();
    // (policy, estimator, alpha bits) -> calibration outcome
    let mut calibrated: BTreeMap<(PolicyName, EstimatorKind, u64), Calibrated> = BTreeMap::new();

    for &est in &cfg.estimators {
        let run_cfg = cfg.run_config(est);
        if cfg.policies.contains(&PolicyName::Threshold) {
            let estimator = crate::belief::Estimator::warm(est, run_cfg.start);
            let results = par::map(cfg.alphas.clone(), exec, |alpha| {
                (alpha, policy::calibrate_threshold(&p, &estimator, alpha, &run_cfg, &cfg.calibration_seeds, exec))
            });
            for (alpha, res) in results {
                let entry = match &res {
                    Ok(b) => {
                        let (minus, plus) = b.policies();
                        let bracket = Bracket {
                            param_minus: b.tau_minus,
                            param_plus: b.tau_plus,
                            rate_minus: b.rate_minus,
                            rate_plus: b.rate_plus,
                        };
                        Ok((minus, plus, bracket))
                    }
                    Err(e) => Err(failure_status(e)),
                };
                calibrated.insert((PolicyName::Threshold, est, alpha.to_bits()), entry);
                out.calibration.thresholds.push(ThresholdCalibration {
                    estimator: est,
                    alpha,
                    error: res.as_ref().err().map(|e| e.to_string()),
                    bracket: res.ok(),
                });
            }
        }
        if cfg.policies.contains(&PolicyName::Dqn) {
            let (entries, report, nets) = calibrate_learned(cfg, &p, est, &run_cfg, exec);
            for (alpha, entry) in entries {
                calibrated.insert((PolicyName::Dqn, est, alpha.to_bits()), entry);
            }
            out.calibration.lambdas.push(report);
            out.networks.extend(nets);
        }
    }

    let mut cells = Vec::new();
    for &policy in &cfg.policies {
        for &est in &cfg.estimators {
            for &alpha in &cfg.alphas {
                for &seed in &cfg.seeds {
                    cells.push((policy, est, alpha, seed));
                }
            }
        }
    }
    let rows = par::map(cells, exec, |(policy, est, alpha, seed)| {
        let run_cfg = cfg.run_config(est);
        let (kind, bracket) = match policy {
            PolicyName::Never => (Ok(PolicyKind::NeverPull), None),
            PolicyName::Always => (Ok(PolicyKind::AlwaysPull), None),
            PolicyName::Random => (Ok(PolicyKind::Random { alpha }), None),
            PolicyName::Uniform => (Ok(PolicyKind::Uniform { alpha }), None),
            PolicyName::Threshold | PolicyName::Dqn => match &calibrated[&(policy, est, alpha.to_bits())] {
                Ok((minus, plus, b)) => (Ok(PolicyKind::steered(minus.clone(), plus.clone(), alpha)), Some(*b)),
                Err(status) => (Err(status.clone()), None),
            },
        };
        let (metrics, status) = match kind.and_then(|k| policy::simulate(&k, &p, &run_cfg, seed).map_err(|e| failure_status(&e))) {
            Ok(m) => (Some(m), RowStatus::Ok),
            Err(status) => (None, status),
        };
        ResultRow { policy, estimator: est, alpha, seed, metrics, status, bracket }
    });
    out.rows = rows;
    out.rows.sort_by(|a, b| {
        (a.policy, a.estimator).cmp(&(b.policy, b.estimator)).then(a.alpha.total_cmp(&b.alpha)).then(a.seed.cmp(&b.seed))
    });
    Ok(out)
}

/// λ sweep for one estimator, shared by every budget.
fn calibrate_learned(
    cfg: &ExperimentConfig,
    p: &TransitionMatrix,
    est: EstimatorKind,
    run_cfg: &RunConfig,
    exec: Execution,
) -> (Vec<(f64, Calibrated)>, LambdaCalibration, Vec<SavedNetwork>) {
    let restart_seeds = cfg.restart_seeds();
    let reports: Mutex<BTreeMap<u64, TrainingReport>> = Mutex::new(BTreeMap::new());
    let train = |lambda: f64| -> policy::Result<PolicyKind> {
        let best = dqn::train_best(p, est, &cfg.train_config(lambda), &restart_seeds, exec)?;
        reports.lock().expect("report lock").insert(lambda.to_bits(), best.trained.report.clone());
        Ok(best.trained.policy())
    };
    let measure = |policy: &PolicyKind| -> policy::Result<RunMetrics> {
        let mut total = RunMetrics::default();
        for &seed in &cfg.calibration_seeds {
            let m = policy::simulate(policy, p, run_cfg, seed)?;
            total.sum_aoii += m.sum_aoii;
            total.sum_actions += m.sum_actions;
            total.sum_expected_aoii += m.sum_expected_aoii;
            total.slots += m.slots;
        }
        Ok(total)
    };

    let swept = LambdaSweep::build(&cfg.lambda_grid, &train, &measure, exec).and_then(|mut s| {
        let feasible: Vec<f64> = cfg.alphas.iter().copied().filter(|a| *a > 0.0 && *a < 1.0).collect();
        s.refine(&feasible, &train, &measure, exec)?;
        Ok(s)
    });
    let sweep = match swept {
        Ok(s) => s,
        Err(e) => {
            let status = failure_status(&e);
            let entries = cfg.alphas.iter().map(|&a| (a, Err(status.clone()))).collect();
            let report = LambdaCalibration { estimator: est, sweep: None, brackets: Vec::new(), error: Some(e.to_string()) };
            return (entries, report, Vec::new());
        }
    };

    let mut entries = Vec::new();
    let mut brackets = Vec::new();
    for &alpha in &cfg.alphas {
        match sweep.bracket(alpha) {
            Ok(b) => {
                let meta = Bracket {
                    param_minus: b.lambda_minus,
                    param_plus: b.lambda_plus,
                    rate_minus: b.rate_minus,
                    rate_plus: b.rate_plus,
                };
                entries.push((alpha, Ok((b.minus.clone(), b.plus.clone(), meta))));
                brackets.push((alpha, Some(b)));
            }
            Err(e) => {
                entries.push((alpha, Err(failure_status(&e))));
                brackets.push((alpha, None));
            }
        }
    }
    let mut reports = reports.into_inner().expect("report lock");
    let nets = sweep
        .points
        .iter()
        .filter_map(|pt| match &pt.policy {
            PolicyKind::Learned(net) => Some(SavedNetwork {
                estimator: est,
                lambda: pt.lambda,
                network: Arc::clone(net),
                report: reports.remove(&pt.lambda.to_bits()),
            }),
            _ => None,
        })
        .collect();
    let report = LambdaCalibration { estimator: est, sweep: Some(sweep), brackets, error: None };
    (entries, report, nets)
}

fn create(path: &Path) -> io::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_results<W: Write>(rows: &[ResultRow], w: &mut W) -> io::Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "{}", ResultRow::CSV_HEADER)?;
    rows.iter().try_for_each(|r| r.write_csv(w))
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], w: &mut W) -> io::Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "{}", AggregateRow::CSV_HEADER)?;
    rows.iter().try_for_each(|r| r.write_csv(w))
}

/// Writes `results.csv`, `aggregate.csv`, `calibration.json` and one
/// network file (plus training curve) per trained λ.
pub fn write_sweep(out: &SweepOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("results.csv"))?;
    write_results(&out.rows, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("aggregate.csv"))?;
    write_aggregate(&aggregate(&out.rows), &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("calibration.json"))?;
    serde_json::to_writer_pretty(&mut w, &out.calibration)?;
    writeln!(w)?;
    w.flush()?;
    for net in &out.networks {
        let stem = format!("dqn_{}_lambda_{}", net.estimator, net.lambda);
        fs::write(dir.join(format!("{stem}.txt")), net.network.to_text())?;
        if let Some(report) = &net.report {
            let mut w = create(&dir.join(format!("{stem}_training.csv")))?;
            writeln!(w, "{CSV_VERSION_LINE}")?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Possible observations produced by one slot's action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceBranch {
    /// Slot of the action; the observation arrives in the next slot.
    pub t: u64,
    pub observation: Observation,
    pub probability: f64,
    pub realized: bool,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<sim::SlotRecord>,
    /// Belief at every slot, before its action.
    pub beliefs: Vec<crate::belief::Belief>,
    pub branches: Vec<TraceBranch>,
}

struct Scripted<'a>(&'a [u64]);

impl PullPolicy for Scripted<'_> {
    fn decide(&mut self, _: &crate::belief::Belief, t: u64, _: &mut crate::rng::RandomSource) -> Action {
        Action::from_bool(self.0.contains(&t))
    }
}

/// One seeded run with the belief, estimate, action and observation branches of every slot.
pub fn run_trace(cfg: &ExperimentConfig, trace: &TraceConfig) -> Result<Trace> {
    cfg.validate()?;
    cfg.check_trace(trace)?;
    let p = cfg.transition_matrix()?;
    let est = trace.estimator.unwrap_or(cfg.estimators[0]);
    let seed = trace.seed.unwrap_or(cfg.seeds[0]);
    let run_cfg = RunConfig { horizon: trace.horizon, warmup: 0, ..cfg.run_config(est) };

    let kind = match &trace.policy {
        TracePolicy::Slots { .. } => None,
        TracePolicy::Never => Some(PolicyKind::NeverPull),
        TracePolicy::Always => Some(PolicyKind::AlwaysPull),
        TracePolicy::Random { alpha } => Some(PolicyKind::Random { alpha: *alpha }),
        TracePolicy::Uniform { alpha } => Some(PolicyKind::Uniform { alpha: *alpha }),
        TracePolicy::Threshold { tau } => Some(PolicyKind::Threshold { tau: *tau }),
    };
    let mut runner = kind.as_ref().map(PolicyRunner::new);
    let mut scripted = match &trace.policy {
        TracePolicy::Slots { slots } => Some(Scripted(slots)),
        _ => None,
    };
    let policy: &mut dyn PullPolicy = match (&mut runner, &mut scripted) {
        (Some(r), _) => r,
        (None, Some(s)) => s,
        (None, None) => unreachable!("one of the two is set"),
    };

    let mut world = WorldState::new(run_cfg.start, seed);
    let mut monitor = Monitor::warm(p.n(), run_cfg.delta_max, est, run_cfg.start);
    let mut policy_rng = crate::rng::seeded(seed, crate::rng::POLICY_STREAM);
    let mut out = Trace { records: Vec::new(), beliefs: Vec::new(), branches: Vec::new() };
    for _ in 0..run_cfg.horizon {
        let b = monitor.belief.clone();
        let action = policy.decide(&b, world.t, &mut policy_rng);
        let x = world.x;
        let record = sim::slot_step(&mut world, &mut monitor, action, &p)?;
        if action.is_pull() {
            for (k, &pi) in b.marginal().iter().enumerate() {
                if pi > 0.0 {
                    out.branches.push(TraceBranch {
                        t: record.t,
                        observation: Observation::Delivered(StateIndex::from_zero_based(k)),
                        probability: pi,
                        realized: k == x.index(),
                    });
                }
            }
        } else {
            out.branches.push(TraceBranch { t: record.t, observation: Observation::Empty, probability: 1.0, realized: true });
        }
        out.records.push(record);
        out.beliefs.push(b);
    }
    Ok(out)
}

/// Writes `trace.csv`, `beliefs.csv` and `branches.csv`.
pub fn write_trace(trace: &Trace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("trace.csv"))?;
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "{}", sim::SlotRecord::CSV_HEADER)?;
    for r in &trace.records {
        r.write_csv(&mut w)?;
    }
    w.flush()?;

    let mut w = create(&dir.join("beliefs.csv"))?;
    writeln!(w, "{CSV_VERSION_LINE}")?;
    for (k, (b, r)) in trace.beliefs.iter().zip(&trace.records).enumerate() {
        b.write_csv(&mut w, Some(r.t), k == 0)?;
    }
    w.flush()?;

    let mut w = create(&dir.join("branches.csv"))?;
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "t,observation,probability,realized")?;
    for br in &trace.branches {
        writeln!(w, "{},{},{},{}", br.t, br.observation, br.probability, u8::from(br.realized))?;
    }
    w.flush()?;
    Ok(())
}

/// Options supplied on the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub out_dir: PathBuf,
    pub rows: usize,
    pub failures: usize,
    pub trace_written: bool,
}

/// Runs the sweep (and the trace, if requested) and writes every output.
///
/// Command-line options take precedence over the config's `out_dir` and
/// `workers`.
pub fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    cfg.validate()?;
    let out_dir = opts.out_dir.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let workers = opts.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(ExperimentError::Config("workers must be at least 1".into()));
    }
    let exec = if workers == Some(1) { Execution::Sequential } else { Execution::default() };

    let out = with_workers(workers, || run_sweep(cfg, exec))??;
    write_sweep(&out, &out_dir)?;

    let trace_cfg = match (&cfg.trace, opts.trace) {
        (Some(t), _) => Some(t.clone()),
        (None, true) => Some(TraceConfig::default()),
        (None, false) => None,
    };
    if let Some(t) = &trace_cfg {
        write_trace(&run_trace(cfg, t)?, &out_dir)?;
    }
    Ok(Summary { out_dir, rows: out.rows.len(), failures: out.failures(), trace_written: trace_cfg.is_some() })
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| ExperimentError::Config(format!("cannot start {k} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(_workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}
