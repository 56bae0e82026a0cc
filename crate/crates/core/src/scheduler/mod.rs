//! Configuration selection under prioritized hard constraints and ordered
//! soft targets.
//!
//! Every invocation recomputes the metric vector of each ⟨split,
//! precision⟩ configuration from the profile and the current link and
//! load estimates, filters by the constraints in priority order and picks
//! the lexicographically preferred survivor.

mod metrics;
mod select;
mod slo;

use thiserror::Error;

use crate::profiler::ProfilerError;

pub use metrics::{evaluate_space, full_space, predict_metrics, Candidate, CostInputs, Metric, MetricVector};
pub use select::{neurosurgeon, preference, schedule, select, should_reschedule, ScheduleDecision, RESCHEDULE_THRESHOLD};
pub use slo::{ConstraintOp, Goal, HardConstraint, Slo, SoftTarget, VIOLATION_EPS};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("configuration space is empty")]
    EmptySpace,
    #[error("at least one soft target is required")]
    NoTargets,
    #[error("metric `{0}` appears in more than one soft target")]
    DuplicateTarget(Metric),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Profile(#[from] ProfilerError),
}
