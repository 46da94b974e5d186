use std::fs;
use std::path::Path;
use std::process::Command;

use aoii_lab::chain::ternary_source;
use aoii_lab::experiment::{self, ExperimentConfig, RunOptions, TraceConfig, TracePolicy, CSV_VERSION_LINE};

const P2: &str = "[[0.70, 0.25, 0.05], [0.05, 0.90, 0.05], [0.10, 0.30, 0.60]]";

fn small_sweep() -> String {
    format!(
        r#"{{
            "matrix": {P2},
            "estimators": ["map", "martingale"],
            "policies": ["uniform", "random", "threshold", "never"],
            "alphas": [0.1, 0.25],
            "seeds": [3, 1, 2],
            "horizon": 5000,
            "calibration_seeds": [11, 12]
        }}"#
    )
}

fn run_into(config: &str, dir: &Path, workers: Option<usize>) -> experiment::Summary {
    let cfg = ExperimentConfig::from_json(config).unwrap();
    experiment::execute(&cfg, &RunOptions { out_dir: Some(dir.to_path_buf()), workers, trace: false }).unwrap()
}

/// Data lines of a CSV written by the experiment, after the version line and header.
fn data_lines(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
    lines.next().expect("header");
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn identical_configs_give_identical_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = run_into(&small_sweep(), a.path(), None);
    run_into(&small_sweep(), b.path(), Some(1));
    assert_eq!(s.failures, 0);
    assert_eq!(s.rows, 4 * 2 * 2 * 3);
    for f in ["results.csv", "aggregate.csv", "calibration.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn aggregate_matches_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    run_into(&small_sweep(), dir.path(), None);
    let rows = data_lines(&dir.path().join("results.csv"));
    let agg = data_lines(&dir.path().join("aggregate.csv"));
    assert_eq!(agg.len(), 4 * 2 * 2);
    for a in &agg {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == a[0] && r[1] == a[1] && r[2] == a[2])
            .map(|r| r[4].parse().unwrap())
            .collect();
        assert_eq!(values.len(), a[3].parse::<usize>().unwrap());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - a[4].parse::<f64>().unwrap()).abs() <= 1e-12, "{a:?}");
    }
}

#[test]
fn rows_are_sorted_by_policy_estimator_alpha_seed() {
    let dir = tempfile::tempdir().unwrap();
    run_into(&small_sweep(), dir.path(), None);
    let rows = data_lines(&dir.path().join("results.csv"));
    let order = ["never", "random", "uniform", "threshold"];
    let keys: Vec<(usize, String, f64, u64)> = rows
        .iter()
        .map(|r| (order.iter().position(|p| *p == r[0]).unwrap(), r[1].clone(), r[2].parse().unwrap(), r[3].parse().unwrap()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)).then(a.2.total_cmp(&b.2)).then(a.3.cmp(&b.3)));
    assert_eq!(keys, sorted);
}

#[test]
fn budget_policies_meet_their_rates() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_sweep().replace("\"horizon\": 5000", "\"horizon\": 100000");
    run_into(&config, dir.path(), None);
    for r in data_lines(&dir.path().join("results.csv")) {
        let alpha: f64 = r[2].parse().unwrap();
        let rate: f64 = r[5].parse().unwrap();
        let tol = match r[0].as_str() {
            "uniform" => 2.0 / 1e5,
            "random" => 3.0 * (alpha * (1.0 - alpha) / 1e5).sqrt(),
            "threshold" => (10.0f64 / 1e5).max(1e-3),
            _ => continue,
        };
        assert!((rate - alpha).abs() <= tol, "{r:?}");
    }
}

fn trace_config(policy: TracePolicy) -> (ExperimentConfig, TraceConfig) {
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{ "matrix": {P2}, "policies": ["never"], "alphas": [0.0], "seeds": [7], "horizon": 10 }}"#
    ))
    .unwrap();
    (cfg, TraceConfig { horizon: 12, seed: None, estimator: None, policy })
}

#[test]
fn trace_branches_at_a_pull_follow_the_chain() {
    let (cfg, t) = trace_config(TracePolicy::Slots { slots: vec![3] });
    let trace = experiment::run_trace(&cfg, &t).unwrap();
    let e1_p3 = &ternary_source().power(3)[0];
    let at3: Vec<_> = trace.branches.iter().filter(|b| b.t == 3).collect();
    assert_eq!(at3.len(), 3);
    for (k, br) in at3.iter().enumerate() {
        assert_eq!(br.observation, aoii_lab::Observation::Delivered(aoii_lab::StateIndex::from_zero_based(k)));
        assert!((br.probability - e1_p3[k]).abs() <= 1e-12, "{br:?} vs {e1_p3:?}");
    }
    assert_eq!(at3.iter().filter(|b| b.realized).count(), 1);
    assert!(trace.branches.iter().filter(|b| b.t != 3).all(|b| b.observation == aoii_lab::Observation::Empty));
    assert_eq!(trace.records.iter().filter(|r| r.action.is_pull()).map(|r| r.t).collect::<Vec<_>>(), vec![3]);
}

#[test]
fn trace_without_pulls_observes_nothing() {
    let (cfg, t) = trace_config(TracePolicy::Never);
    let trace = experiment::run_trace(&cfg, &t).unwrap();
    assert_eq!(trace.branches.len(), 12);
    assert!(trace.branches.iter().all(|b| b.observation == aoii_lab::Observation::Empty && b.probability == 1.0));
}

#[test]
fn trace_files_are_reproducible() {
    let (cfg, t) = trace_config(TracePolicy::Random { alpha: 0.3 });
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    experiment::write_trace(&experiment::run_trace(&cfg, &t).unwrap(), a.path()).unwrap();
    experiment::write_trace(&experiment::run_trace(&cfg, &t).unwrap(), b.path()).unwrap();
    for f in ["trace.csv", "beliefs.csv", "branches.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(a.path().join("trace.csv")).unwrap();
    assert_eq!(header.lines().nth(1), Some("t,x,x_hat,aoii,action,expected_aoii"));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aoii-lab")).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_string()
    };
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let ok = write("ok.json", &format!(r#"{{ "matrix": {P2}, "policies": ["random"], "alphas": [0.2], "seeds": [1], "horizon": 1000 }}"#));
    let res = cli(&["run", &ok, "--out", out, "--trace"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["results.csv", "aggregate.csv", "calibration.json", "trace.csv", "beliefs.csv", "branches.csv"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }

    let empty = write("empty.json", &format!(r#"{{ "matrix": {P2}, "policies": [], "alphas": [0.2], "seeds": [1] }}"#));
    assert_eq!(cli(&["run", &empty, "--out", out]).status.code(), Some(2));
    let broken = write("broken.json", "{ not json");
    assert_eq!(cli(&["run", &broken, "--out", out]).status.code(), Some(2));
    assert_eq!(cli(&["run", "/nonexistent/config.json"]).status.code(), Some(2));

    let infeasible = write(
        "infeasible.json",
        &format!(r#"{{ "matrix": {P2}, "policies": ["threshold", "random"], "alphas": [0.000005], "seeds": [1], "horizon": 100000 }}"#),
    );
    let res = cli(&["run", &infeasible, "--out", out, "--workers", "1"]);
    assert_eq!(res.status.code(), Some(3));
    let rows = data_lines(&Path::new(out).join("results.csv"));
    assert_eq!(rows.len(), 2, "partial results are still written");
    assert!(rows.iter().any(|r| r[0] == "threshold" && r[7] == "bracket_failure"));
}
