use std::cmp::Ordering;

use super::{evaluate_space, Candidate, CostInputs, Metric, MetricVector, ScheduleError, Slo};
use crate::graph::NodeId;
use crate::ispm::Precision;
use crate::profiler::ProfileDB;

/// Relative change in any watched input that triggers rescheduling.
pub const RESCHEDULE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleDecision {
    pub split: NodeId,
    pub precision: Precision,
    pub predicted: MetricVector,
    /// Set iff the returned configuration violates some hard constraint.
    pub best_effort: bool,
}

impl ScheduleDecision {
    fn from(c: &Candidate, best_effort: bool) -> Self {
        Self {
            split: c.split,
            precision: c.precision,
            predicted: c.metrics,
            best_effort,
        }
    }
}

/// Soft targets, then larger split, then smaller bitwidth.
pub fn preference(slo: &Slo, a: &Candidate, b: &Candidate) -> Ordering {
    slo.compare(&a.metrics, &b.metrics)
        .then_with(|| b.split.cmp(&a.split))
        .then_with(|| a.precision.width().cmp(&b.precision.width()))
}

/// Filters `candidates` by the constraints in priority order and returns
/// the preferred survivor. When constraint `i` eliminates every remaining
/// configuration, returns the one among those surviving constraints
/// `0..i` with the smallest normalized violation of constraint `i`.
pub fn select(candidates: &[Candidate], slo: &Slo) -> Result<ScheduleDecision, ScheduleError> {
    if candidates.is_empty() {
        return Err(ScheduleError::EmptySpace);
    }
    slo.validate()?;
    let mut feasible: Vec<usize> = (0..candidates.len()).collect();
    for constraint in &slo.constraints {
        let survivors: Vec<usize> = feasible
            .iter()
            .copied()
            .filter(|&i| constraint.satisfied(&candidates[i].metrics))
            .collect();
        if survivors.is_empty() {
            let closest = feasible
                .iter()
                .map(|&i| &candidates[i])
                .min_by(|a, b| {
                    let va = constraint.violation(&a.metrics);
                    let vb = constraint.violation(&b.metrics);
                    va.partial_cmp(&vb)
                        .expect("metrics are finite")
                        .then_with(|| preference(slo, a, b))
                })
                .expect("feasible set is never empty");
            return Ok(ScheduleDecision::from(closest, true));
        }
        feasible = survivors;
    }
    let best = feasible
        .iter()
        .map(|&i| &candidates[i])
        .min_by(|a, b| preference(slo, a, b))
        .expect("feasible set is never empty");
    Ok(ScheduleDecision::from(best, false))
}

/// Recomputes every configuration's metrics and selects one.
pub fn schedule(
    profile: &ProfileDB,
    space: &[(NodeId, Precision)],
    slo: &Slo,
    inputs: &CostInputs,
    pipelined: bool,
) -> Result<ScheduleDecision, ScheduleError> {
    if space.is_empty() {
        return Err(ScheduleError::EmptySpace);
    }
    let candidates = evaluate_space(profile, space, inputs, pipelined)?;
    select(&candidates, slo)
}

/// True iff bandwidth, latency or either load factor moved by more than
/// 5% since the last invocation.
pub fn should_reschedule(prev: &CostInputs, cur: &CostInputs) -> bool {
    let pairs = [
        (prev.link.bandwidth, cur.link.bandwidth),
        (prev.link.latency_ms, cur.link.latency_ms),
        (prev.load.sf_client, cur.load.sf_client),
        (prev.load.sf_server, cur.load.sf_server),
    ];
    pairs.iter().any(|&(p, c)| {
        if p == 0.0 {
            c != 0.0
        } else {
            ((c - p) / p).abs() > RESCHEDULE_THRESHOLD
        }
    })
}

/// Single-objective baseline: passthrough-only packing, minimum
/// unpipelined latency, no constraints.
pub fn neurosurgeon(profile: &ProfileDB, inputs: &CostInputs) -> Result<ScheduleDecision, ScheduleError> {
    let space: Vec<(NodeId, Precision)> = profile
        .splits
        .iter()
        .map(|&s| (s, Precision::Passthrough))
        .collect();
    let slo = Slo::new(vec![], vec![super::SoftTarget::new(Metric::Latency, super::Goal::Min)])?;
    schedule(profile, &space, &slo, inputs, false)
}
