use aoii_lab::belief::{successor_distribution, Estimator, Observation};
use aoii_lab::chain::{StateIndex, TransitionMatrix};
use aoii_lab::policy::{steering_run, PolicyKind};
use aoii_lab::{Action, Belief, EstimatorKind, RunConfig};
use proptest::prelude::*;

fn stochastic(n: usize) -> impl Strategy<Value = TransitionMatrix> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), n).prop_map(|rows| {
        let rows = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        TransitionMatrix::from_rows(rows).expect("normalized rows")
    })
}

fn any_chain() -> impl Strategy<Value = TransitionMatrix> {
    (2usize..=4).prop_flat_map(stochastic)
}

fn estimator_kind() -> impl Strategy<Value = EstimatorKind> {
    prop_oneof![Just(EstimatorKind::Map), Just(EstimatorKind::Martingale)]
}

/// Runs the recursion along a random action sequence with observations drawn from the belief itself.
fn walk(p: &TransitionMatrix, kind: EstimatorKind, actions: &[bool], picks: &[f64], delta_max: usize) -> Vec<(Belief, Estimator)> {
    let start = StateIndex::new(1).unwrap();
    let mut b = Belief::point_mass(p.n(), delta_max, start);
    let mut est = Estimator::warm(kind, start);
    let mut out = vec![(b.clone(), est)];
    let mut pending: Option<StateIndex> = None;
    for (&pull, &u) in actions.iter().zip(picks) {
        let o = pending.take().map_or(Observation::Empty, Observation::Delivered);
        b = b.update(o, p, &mut est).unwrap().0;
        if pull {
            // draw the sampled state from the current marginal
            let pi = b.marginal();
            let mut acc = 0.0;
            let k = pi.iter().position(|&m| {
                acc += m;
                u < acc
            });
            let k = k.unwrap_or_else(|| pi.iter().rposition(|&m| m > 0.0).unwrap());
            pending = Some(StateIndex::from_zero_based(k));
        }
        out.push((b.clone(), est));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn belief_stays_a_distribution(
        p in any_chain(),
        kind in estimator_kind(),
        actions in prop::collection::vec(any::<bool>(), 1..40),
        picks in prop::collection::vec(0.0f64..1.0, 40),
        delta_max in 1usize..16,
    ) {
        for (b, _) in walk(&p, kind, &actions, &picks, delta_max) {
            prop_assert!((b.total() - 1.0).abs() <= 1e-9);
            prop_assert!(b.as_slice().iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn propagation_places_the_estimate_at_age_zero(
        p in any_chain(),
        kind in estimator_kind(),
        actions in prop::collection::vec(any::<bool>(), 1..20),
        picks in prop::collection::vec(0.0f64..1.0, 20),
    ) {
        for (b, est) in walk(&p, kind, &actions, &picks, 15) {
            let (next, x_hat) = b.propagate(&p, &est).unwrap();
            let pi_next = p.push_forward(&b.marginal());
            let h = x_hat.index();
            // the estimate row carries its whole marginal at age zero
            prop_assert!((next.get(h, 0) - pi_next[h]).abs() <= 1e-12);
            for i in 0..p.n() {
                let row: f64 = (0..=15).map(|d| next.get(i, d)).sum();
                prop_assert!((row - pi_next[i]).abs() <= 1e-9);
                if i != h {
                    prop_assert_eq!(next.get(i, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn successors_form_a_distribution(
        p in any_chain(),
        kind in estimator_kind(),
        actions in prop::collection::vec(any::<bool>(), 1..15),
        picks in prop::collection::vec(0.0f64..1.0, 15),
        pull in any::<bool>(),
    ) {
        let (b, est) = walk(&p, kind, &actions, &picks, 15).pop().unwrap();
        let action = Action::from_bool(pull);
        let succ = successor_distribution(&b, action, &p, &est).unwrap();
        let total: f64 = succ.iter().map(|s| s.probability).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        if !pull {
            prop_assert_eq!(succ.len(), 1);
        }
        // averaging the successors recovers the unconditioned state law
        let mut mixed = vec![0.0; p.n()];
        for s in &succ {
            for (m, v) in mixed.iter_mut().zip(s.belief.marginal()) {
                *m += s.probability * v;
            }
        }
        let expected = p.push_forward(&b.marginal());
        for (m, e) in mixed.iter().zip(&expected) {
            prop_assert!((m - e).abs() <= 1e-9);
        }
    }

    #[test]
    fn powers_stay_stochastic(p in any_chain(), k in 0u64..200) {
        for row in p.power(k) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12 * (k as f64 + 1.0));
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn stationary_is_invariant(p in any_chain()) {
        let pi = p.stationary().unwrap();
        let next = p.push_forward(&pi);
        for (a, b) in pi.iter().zip(&next) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn state_index_round_trips(i in 1usize..1000) {
        let s = StateIndex::new(i).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(text, i.to_string());
        prop_assert_eq!(serde_json::from_str::<StateIndex>(&i.to_string()).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn steering_meets_any_feasible_budget(p in any_chain(), alpha in 0.01f64..0.99, seed in 0u64..1000) {
        let cfg = RunConfig { horizon: 5_000, ..RunConfig::default() };
        let m = steering_run(&PolicyKind::NeverPull, &PolicyKind::AlwaysPull, alpha, &p, &cfg, seed).unwrap();
        prop_assert!((m.rate() - alpha).abs() <= 10.0 / cfg.horizon as f64);
        let inner = PolicyKind::Random { alpha: 0.5 * (1.0 + alpha) };
        let m = steering_run(&PolicyKind::NeverPull, &inner, 0.5 * alpha, &p, &cfg, seed).unwrap();
        prop_assert!((m.rate() - 0.5 * alpha).abs() <= 10.0 / cfg.horizon as f64);
    }
}
