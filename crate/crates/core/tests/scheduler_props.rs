mod common;

use onloadrt_core::ispm::Precision;
use onloadrt_core::profiler::ProfileDB;
use onloadrt_core::scheduler::{
    evaluate_space, full_space, neurosurgeon, predict_metrics, schedule, ConstraintOp, CostInputs, Goal,
    HardConstraint, Metric, Slo, SoftTarget,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Scenario {
    profile: ProfileDB,
    space: Vec<(usize, Precision)>,
    slo: Slo,
    inputs: CostInputs,
    pipelined: bool,
}

fn scenario(seed: u64, precisions: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rng.random_range(2..40);
    let splits = rng.random_range(1..=nodes);
    let profile = common::random_profile(&mut rng, nodes, splits, precisions);
    let inputs = common::random_inputs(&mut rng);
    let pipelined = rng.random_bool(0.5);
    let space = common::random_space(&mut rng, &profile);
    let table: Vec<[f64; 5]> = space
        .iter()
        .map(|&(s, q)| common::brute_metrics(&profile, &inputs, s, q, pipelined))
        .collect();
    let slo = common::random_slo(&mut rng, &table);
    Scenario { profile, space, slo, inputs, pipelined }
}

/// Scales a time threshold by `k`, a rate by `1/k`; accuracy is unitless.
fn rescale(metric: Metric, v: f64, k: f64) -> f64 {
    match metric {
        Metric::Throughput => v / k,
        Metric::Accuracy => v,
        _ => v * k,
    }
}

fn rescale_slo(slo: &Slo, k: f64) -> Slo {
    let constraints = slo
        .constraints
        .iter()
        .map(|c| {
            let op = match c.op {
                ConstraintOp::Near { tolerance } => ConstraintOp::Near { tolerance: rescale(c.metric, tolerance, k) },
                op => op,
            };
            HardConstraint::new(c.metric, op, rescale(c.metric, c.threshold, k))
        })
        .collect();
    let targets = slo
        .targets
        .iter()
        .map(|t| match t.goal {
            Goal::Approach(v) => SoftTarget::new(t.metric, Goal::Approach(rescale(t.metric, v, k))),
            _ => *t,
        })
        .collect();
    Slo::new(constraints, targets).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_the_brute_force_oracle(seed in any::<u64>(), precisions in 1usize..=17) {
        let s = scenario(seed, precisions);
        let d = schedule(&s.profile, &s.space, &s.slo, &s.inputs, s.pipelined).unwrap();
        let want = common::oracle(&s.profile, &s.space, &s.slo, &s.inputs, s.pipelined);
        prop_assert_eq!((d.split, d.precision, d.best_effort), want);
    }

    #[test]
    fn best_effort_only_when_nothing_is_feasible(seed in any::<u64>(), precisions in 1usize..=17) {
        let s = scenario(seed, precisions);
        let d = schedule(&s.profile, &s.space, &s.slo, &s.inputs, s.pipelined).unwrap();
        let all = evaluate_space(&s.profile, &s.space, &s.inputs, s.pipelined).unwrap();
        let feasible = |m| s.slo.constraints.iter().all(|c| c.satisfied(m));
        prop_assert!(s.space.contains(&(d.split, d.precision)));
        if d.best_effort {
            prop_assert!(!all.iter().any(|c| feasible(&c.metrics)));
        } else {
            prop_assert!(feasible(&d.predicted));
        }
    }

    /// Expressing every time in a different unit (and bandwidth
    /// accordingly) never changes the decision. Powers of two keep the
    /// rescaling exact.
    #[test]
    fn decision_is_unit_invariant(seed in any::<u64>(), precisions in 1usize..=17, j in -6i32..=6) {
        let s = scenario(seed, precisions);
        let k = 2f64.powi(j);
        let mut scaled = s.profile.clone();
        for times in scaled.layer_ms.values_mut() {
            // Keeps every stage far above the throughput floor.
            times.iter_mut().for_each(|t| *t = t.max(0.25) * k);
        }
        let mut base = s.profile.clone();
        for times in base.layer_ms.values_mut() {
            times.iter_mut().for_each(|t| *t = t.max(0.25));
        }
        scaled.entries.iter_mut().for_each(|e| e.pack_ms *= k);
        let mut inputs = s.inputs;
        inputs.link.latency_ms *= k;
        inputs.link.bandwidth /= k;
        let a = schedule(&base, &s.space, &s.slo, &s.inputs, s.pipelined).unwrap();
        let b = schedule(&scaled, &s.space, &rescale_slo(&s.slo, k), &inputs, s.pipelined).unwrap();
        prop_assert_eq!((a.split, a.precision, a.best_effort), (b.split, b.precision, b.best_effort));
    }

    /// Relaxing the deadline under min server_cost never moves work back
    /// to the server.
    #[test]
    fn relaxed_deadline_onloads_monotonically(seed in any::<u64>(), lo in 0.0f64..400.0, extra in 0.0f64..400.0) {
        let s = scenario(seed, 5);
        let space = full_space(&s.profile);
        let slo = |deadline: f64| {
            Slo::new(
                vec![HardConstraint::new(Metric::Latency, ConstraintOp::AtMost, deadline)],
                vec![SoftTarget::new(Metric::ServerCost, Goal::Min)],
            )
            .unwrap()
        };
        let tight = schedule(&s.profile, &space, &slo(lo), &s.inputs, false).unwrap();
        let loose = schedule(&s.profile, &space, &slo(lo + extra), &s.inputs, false).unwrap();
        prop_assert!(!loose.best_effort || tight.best_effort);
        prop_assert!(loose.predicted.server_cost <= tight.predicted.server_cost);
        let last = s.profile.output_id();
        if s.profile.prefix_ms(last) * s.inputs.load.sf_client <= lo {
            prop_assert_eq!(tight.split, last);
        }
    }

    /// Device and server costs are linear in their load factors.
    #[test]
    fn load_factors_scale_their_stage(seed in any::<u64>(), j in -4i32..=4) {
        let s = scenario(seed, 5);
        let k = 2f64.powi(j);
        let mut heavier = s.inputs;
        heavier.load.sf_client *= k;
        heavier.load.sf_server *= k;
        for (split, precision) in full_space(&s.profile) {
            let a = predict_metrics(&s.profile, &s.inputs, split, precision, false).unwrap();
            let b = predict_metrics(&s.profile, &heavier, split, precision, false).unwrap();
            let pack = s.profile.entry(split, precision).unwrap().pack_ms;
            prop_assert_eq!(b.server_cost, k * a.server_cost);
            let (ca, cb) = (a.device_cost - pack, b.device_cost - pack);
            prop_assert!((cb - k * ca).abs() <= 1e-12 * (1.0 + cb.abs()), "{} vs {}", cb, k * ca);
            prop_assert_eq!(a.net, b.net);
        }
    }

    /// More bandwidth or less latency never slows a configuration down.
    #[test]
    fn transfer_is_monotone_in_the_link(seed in any::<u64>(), faster in 1.0f64..100.0, closer in 0.0f64..1.0) {
        let s = scenario(seed, 5);
        let mut better = s.inputs;
        better.link.bandwidth *= faster;
        better.link.latency_ms *= closer;
        for (split, precision) in full_space(&s.profile) {
            let a = predict_metrics(&s.profile, &s.inputs, split, precision, s.pipelined).unwrap();
            let b = predict_metrics(&s.profile, &better, split, precision, s.pipelined).unwrap();
            prop_assert!(b.net <= a.net);
            prop_assert!(b.latency <= a.latency);
            prop_assert!(b.throughput >= a.throughput);
        }
    }

    /// The passthrough-only baseline is one point of the full space, so an
    /// unconstrained scheduler can never do worse on its own objective.
    #[test]
    fn dominates_the_single_objective_baseline(seed in any::<u64>(), pipelined in any::<bool>()) {
        let s = scenario(seed, 17);
        let space = full_space(&s.profile);
        let base = neurosurgeon(&s.profile, &s.inputs).unwrap();
        let by_latency = Slo::parse::<&str>(&[], &["min:latency"]).unwrap();
        let d = schedule(&s.profile, &space, &by_latency, &s.inputs, false).unwrap();
        prop_assert!(d.predicted.latency <= base.predicted.latency);
        let by_rate = Slo::parse::<&str>(&[], &["max:throughput"]).unwrap();
        let d = schedule(&s.profile, &space, &by_rate, &s.inputs, pipelined).unwrap();
        let base_rate = predict_metrics(&s.profile, &s.inputs, base.split, base.precision, pipelined).unwrap();
        prop_assert!(d.predicted.throughput >= base_rate.throughput);
    }
}
