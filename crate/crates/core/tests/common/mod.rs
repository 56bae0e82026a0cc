//! Random scheduling scenarios and a brute-force scheduler written
//! directly from the selection rules, independent of the library's
//! filtering and ordering code.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use onloadrt_core::ispm::{Codec, Precision};
use onloadrt_core::profiler::{ConfigProfile, LinkEstimate, LoadState, ProfileDB};
use onloadrt_core::scheduler::{ConstraintOp, CostInputs, Goal, HardConstraint, Metric, SoftTarget, Slo};
use onloadrt_core::NodeId;
use rand::seq::SliceRandom;
use rand::Rng;

pub const ALL_PRECISIONS: [Precision; 17] = [
    Precision::Bits(1),
    Precision::Bits(2),
    Precision::Bits(3),
    Precision::Bits(4),
    Precision::Bits(5),
    Precision::Bits(6),
    Precision::Bits(7),
    Precision::Bits(8),
    Precision::Bits(9),
    Precision::Bits(10),
    Precision::Bits(11),
    Precision::Bits(12),
    Precision::Bits(13),
    Precision::Bits(14),
    Precision::Bits(15),
    Precision::Bits(16),
    Precision::Passthrough,
];

/// A profile with `nodes` layers, `splits` split points (always including
/// the output) and `precisions` precisions. Values are rounded to a coarse
/// grid so that exact metric ties occur and exercise the tie-breaks.
pub fn random_profile<R: Rng>(rng: &mut R, nodes: usize, splits: usize, precisions: usize) -> ProfileDB {
    let coarse = |rng: &mut R, hi: f64| (rng.random_range(0.0..hi) * 4.0).round() / 4.0;
    let client: Vec<f64> = (0..nodes).map(|_| coarse(rng, 5.0)).collect();
    let server: Vec<f64> = (0..nodes).map(|_| coarse(rng, 2.0)).collect();
    let last = nodes - 1;
    let mut ids: Vec<NodeId> = (0..last).collect();
    ids.shuffle(rng);
    let mut split_ids: Vec<NodeId> = ids.into_iter().take(splits.saturating_sub(1).min(last)).collect();
    split_ids.push(last);
    split_ids.sort_unstable();
    let mut precs = ALL_PRECISIONS.to_vec();
    precs.shuffle(rng);
    precs.truncate(precisions.clamp(1, ALL_PRECISIONS.len()));
    let mut entries = Vec::with_capacity(split_ids.len() * precs.len());
    for &s in &split_ids {
        for &p in &precs {
            let client_only = s == last;
            let width = p.width() as f64;
            entries.push(ConfigProfile {
                pack_ms: if client_only { 0.0 } else { coarse(rng, 1.0) },
                dep_bytes: if client_only { 0.0 } else { (rng.random_range(10.0..50_000.0) * width / 32.0).round() },
                acc_delta: if client_only || p == Precision::Passthrough {
                    0.0
                } else {
                    (rng.random_range(0.0..20.0) / width).round()
                },
            });
        }
    }
    let mut layer_ms = BTreeMap::new();
    layer_ms.insert("cpu".to_string(), client);
    layer_ms.insert("gpu".to_string(), server);
    let db = ProfileDB {
        model_digest: [0; 32],
        codec: Codec::Lz4,
        layer_ms,
        client_unit: "cpu".into(),
        server_unit: "gpu".into(),
        splits: split_ids,
        precisions: precs,
        entries,
    };
    db.validate().expect("generated profile is valid");
    db
}

pub fn random_inputs<R: Rng>(rng: &mut R) -> CostInputs {
    CostInputs {
        link: LinkEstimate {
            latency_ms: rng.random_range(0.0..60.0),
            bandwidth: 10f64.powf(rng.random_range(4.0..8.0)),
        },
        load: LoadState { sf_client: rng.random_range(0.5..8.0), sf_server: rng.random_range(0.5..4.0) },
    }
}

/// Predicted metrics computed straight from the cost formulas:
/// `[latency, throughput, server_cost, device_cost, accuracy]`.
pub fn brute_metrics(p: &ProfileDB, inputs: &CostInputs, split: NodeId, prec: Precision, pipelined: bool) -> [f64; 5] {
    let si = p.splits.iter().position(|&s| s == split).unwrap();
    let pi = p.precisions.iter().position(|&q| q == prec).unwrap();
    let e = &p.entries[si * p.precisions.len() + pi];
    let client = &p.layer_ms[&p.client_unit];
    let server = &p.layer_ms[&p.server_unit];
    let prefix: f64 = client[..=split].iter().sum();
    let suffix: f64 = server[split + 1..].iter().sum();
    let device = inputs.load.sf_client * prefix + e.pack_ms;
    let (net, srv) = if split == client.len() - 1 {
        (0.0, 0.0)
    } else {
        (
            inputs.link.latency_ms + e.dep_bytes * 1000.0 / inputs.link.bandwidth,
            inputs.load.sf_server * suffix,
        )
    };
    let latency = device + net + srv;
    let stage = if pipelined { device.max(net).max(srv) } else { latency };
    [latency, 1000.0 / stage.max(1e-6), srv, device, e.acc_delta]
}

fn index(m: Metric) -> usize {
    match m {
        Metric::Latency => 0,
        Metric::Throughput => 1,
        Metric::ServerCost => 2,
        Metric::DeviceCost => 3,
        Metric::Accuracy => 4,
    }
}

/// Random constraints and targets with thresholds drawn from the metric
/// values actually present, sometimes pushed past every configuration.
pub fn random_slo<R: Rng>(rng: &mut R, table: &[[f64; 5]]) -> Slo {
    let mut metrics = onloadrt_core::scheduler::Metric::ALL.to_vec();
    let pick_value = |rng: &mut R, m: Metric| -> f64 {
        let v = table[rng.random_range(0..table.len())][index(m)];
        match rng.random_range(0..10) {
            0 => v * 0.01,
            1 => v * 100.0 + 1.0,
            _ => v * rng.random_range(0.8..1.25),
        }
    };
    let constraints = (0..rng.random_range(0..=3))
        .map(|_| {
            let m = metrics[rng.random_range(0..metrics.len())];
            let op = match rng.random_range(0..5) {
                0 => ConstraintOp::AtLeast,
                1 => ConstraintOp::Near { tolerance: rng.random_range(0.0..5.0) },
                _ => ConstraintOp::AtMost,
            };
            HardConstraint::new(m, op, pick_value(rng, m))
        })
        .collect();
    metrics.shuffle(rng);
    let targets = metrics[..rng.random_range(1..=3)]
        .iter()
        .map(|&m| {
            let goal = match rng.random_range(0..4) {
                0 => Goal::Max,
                1 => Goal::Approach(pick_value(rng, m)),
                _ => Goal::Min,
            };
            SoftTarget::new(m, goal)
        })
        .collect();
    Slo::new(constraints, targets).expect("targets are distinct")
}

fn holds(c: &HardConstraint, v: &[f64; 5]) -> bool {
    let x = v[index(c.metric)];
    match c.op {
        ConstraintOp::AtMost => x <= c.threshold,
        ConstraintOp::AtLeast => x >= c.threshold,
        ConstraintOp::Near { tolerance } => (x - c.threshold).abs() <= tolerance,
    }
}

fn violation(c: &HardConstraint, v: &[f64; 5]) -> f64 {
    (v[index(c.metric)] - c.threshold).abs() / c.threshold.abs().max(1e-9)
}

fn key(t: &SoftTarget, v: &[f64; 5]) -> f64 {
    let x = v[index(t.metric)];
    match t.goal {
        Goal::Min => x,
        Goal::Max => -x,
        Goal::Approach(a) => (x - a).abs(),
    }
}

/// Total preference order: targets, then larger split, then fewer bits.
fn prefer(slo: &Slo, a: &(NodeId, Precision, [f64; 5]), b: &(NodeId, Precision, [f64; 5])) -> Ordering {
    for t in &slo.targets {
        let o = key(t, &a.2).partial_cmp(&key(t, &b.2)).unwrap();
        if o != Ordering::Equal {
            return o;
        }
    }
    b.0.cmp(&a.0).then(a.1.width().cmp(&b.1.width()))
}

/// Exhaustive selection: returns the split, precision and best-effort
/// flag the scheduler must produce.
pub fn oracle(
    p: &ProfileDB,
    space: &[(NodeId, Precision)],
    slo: &Slo,
    inputs: &CostInputs,
    pipelined: bool,
) -> (NodeId, Precision, bool) {
    let mut pool: Vec<(NodeId, Precision, [f64; 5])> = space
        .iter()
        .map(|&(s, q)| (s, q, brute_metrics(p, inputs, s, q, pipelined)))
        .collect();
    for c in &slo.constraints {
        let kept: Vec<_> = pool.iter().filter(|x| holds(c, &x.2)).cloned().collect();
        if kept.is_empty() {
            pool.sort_by(|a, b| {
                violation(c, &a.2).partial_cmp(&violation(c, &b.2)).unwrap().then_with(|| prefer(slo, a, b))
            });
            return (pool[0].0, pool[0].1, true);
        }
        pool = kept;
    }
    pool.sort_by(|a, b| prefer(slo, a, b));
    (pool[0].0, pool[0].1, false)
}

/// A random subset of the profile's configurations, at least one.
pub fn random_space<R: Rng>(rng: &mut R, p: &ProfileDB) -> Vec<(NodeId, Precision)> {
    let all: Vec<(NodeId, Precision)> = p.configs().map(|(s, q, _)| (s, q)).collect();
    let keep = rng.random_range(0.3..=1.0);
    let mut space: Vec<_> = all.iter().copied().filter(|_| rng.random_bool(keep)).collect();
    if space.is_empty() {
        space.push(all[rng.random_range(0..all.len())]);
    }
    space.shuffle(rng);
    space
}
