//! Hard constraints and soft targets, with their text forms:
//!
//! * constraints: `latency<=100ms`, `throughput>=20/s`, `accuracy<=1pp`,
//!   `server_cost==5ms+-0.5`
//! * targets: `min:server_cost`, `max:throughput`, `approach:latency=80ms`

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use super::{Metric, MetricVector, ScheduleError};

/// Denominator floor of the normalized violation.
pub const VIOLATION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintOp {
    AtMost,
    AtLeast,
    /// Within `tolerance` of the threshold.
    Near { tolerance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardConstraint {
    pub metric: Metric,
    pub op: ConstraintOp,
    pub threshold: f64,
}

impl HardConstraint {
    pub fn new(metric: Metric, op: ConstraintOp, threshold: f64) -> Self {
        Self { metric, op, threshold }
    }

    pub fn satisfied(&self, m: &MetricVector) -> bool {
        let v = m.get(self.metric);
        match self.op {
            ConstraintOp::AtMost => v <= self.threshold,
            ConstraintOp::AtLeast => v >= self.threshold,
            ConstraintOp::Near { tolerance } => (v - self.threshold).abs() <= tolerance,
        }
    }

    /// `|m - thr| / max(|thr|, eps)`.
    pub fn violation(&self, m: &MetricVector) -> f64 {
        (m.get(self.metric) - self.threshold).abs() / self.threshold.abs().max(VIOLATION_EPS)
    }
}

impl fmt::Display for HardConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = unit_of(self.metric);
        match self.op {
            ConstraintOp::AtMost => write!(f, "{}<={}{unit}", self.metric, self.threshold),
            ConstraintOp::AtLeast => write!(f, "{}>={}{unit}", self.metric, self.threshold),
            ConstraintOp::Near { tolerance } => {
                write!(f, "{}=={}{unit}+-{tolerance}", self.metric, self.threshold)
            }
        }
    }
}

impl FromStr for HardConstraint {
    type Err = ScheduleError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let (name, op, rest) = if let Some((n, r)) = s.split_once("<=") {
            (n, ConstraintOp::AtMost, r)
        } else if let Some((n, r)) = s.split_once(">=") {
            (n, ConstraintOp::AtLeast, r)
        } else if let Some((n, r)) = s.split_once("==") {
            (n, ConstraintOp::Near { tolerance: 0.0 }, r)
        } else {
            return Err(ScheduleError::Parse(format!("constraint `{text}` needs <=, >= or ==")));
        };
        let metric: Metric = name.parse()?;
        let (value, op) = match op {
            ConstraintOp::Near { .. } => {
                let (v, tol) = rest.split_once("+-").unwrap_or((rest, "0"));
                let tolerance = number(tol, text)?;
                if tolerance < 0.0 {
                    return Err(ScheduleError::Parse(format!("negative tolerance in `{text}`")));
                }
                (v, ConstraintOp::Near { tolerance })
            }
            op => (rest, op),
        };
        let threshold = number(strip_unit(metric, value, text)?, text)?;
        Ok(Self { metric, op, threshold })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Goal {
    Min,
    Max,
    Approach(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTarget {
    pub metric: Metric,
    pub goal: Goal,
}

impl SoftTarget {
    pub fn new(metric: Metric, goal: Goal) -> Self {
        Self { metric, goal }
    }

    /// `Less` when `a` is preferred over `b`.
    pub fn compare(&self, a: &MetricVector, b: &MetricVector) -> Ordering {
        let (x, y) = (a.get(self.metric), b.get(self.metric));
        let ord = match self.goal {
            Goal::Min => x.partial_cmp(&y),
            Goal::Max => y.partial_cmp(&x),
            Goal::Approach(v) => (x - v).abs().partial_cmp(&(y - v).abs()),
        };
        ord.expect("metrics are finite")
    }
}

impl fmt::Display for SoftTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.goal {
            Goal::Min => write!(f, "min:{}", self.metric),
            Goal::Max => write!(f, "max:{}", self.metric),
            Goal::Approach(v) => write!(f, "approach:{}={v}{}", self.metric, unit_of(self.metric)),
        }
    }
}

impl FromStr for SoftTarget {
    type Err = ScheduleError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let (goal, rest) = s
            .split_once(':')
            .ok_or_else(|| ScheduleError::Parse(format!("target `{text}` needs min:, max: or approach:")))?;
        match goal {
            "min" => Ok(Self::new(rest.parse()?, Goal::Min)),
            "max" => Ok(Self::new(rest.parse()?, Goal::Max)),
            "approach" => {
                let (name, value) = rest
                    .split_once('=')
                    .ok_or_else(|| ScheduleError::Parse(format!("target `{text}` needs metric=value")))?;
                let metric: Metric = name.parse()?;
                let v = number(strip_unit(metric, value, text)?, text)?;
                Ok(Self::new(metric, Goal::Approach(v)))
            }
            other => Err(ScheduleError::Parse(format!("unknown goal `{other}` in `{text}`"))),
        }
    }
}

/// Prioritized constraints and ordered targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Slo {
    pub constraints: Vec<HardConstraint>,
    pub targets: Vec<SoftTarget>,
}

impl Slo {
    pub fn new(constraints: Vec<HardConstraint>, targets: Vec<SoftTarget>) -> Result<Self, ScheduleError> {
        let slo = Self { constraints, targets };
        slo.validate()?;
        Ok(slo)
    }

    pub fn parse<S: AsRef<str>>(hard: &[S], soft: &[S]) -> Result<Self, ScheduleError> {
        let constraints = hard.iter().map(|s| s.as_ref().parse()).collect::<Result<_, _>>()?;
        let targets = soft.iter().map(|s| s.as_ref().parse()).collect::<Result<_, _>>()?;
        Self::new(constraints, targets)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.targets.is_empty() {
            return Err(ScheduleError::NoTargets);
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].iter().any(|u| u.metric == t.metric) {
                return Err(ScheduleError::DuplicateTarget(t.metric));
            }
        }
        Ok(())
    }

    /// Lexicographic preference over the targets.
    pub fn compare(&self, a: &MetricVector, b: &MetricVector) -> Ordering {
        self.targets
            .iter()
            .map(|t| t.compare(a, b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

fn unit_of(metric: Metric) -> &'static str {
    match metric {
        Metric::Latency | Metric::ServerCost | Metric::DeviceCost => "ms",
        Metric::Throughput => "/s",
        Metric::Accuracy => "pp",
    }
}

fn strip_unit<'a>(metric: Metric, value: &'a str, text: &str) -> Result<&'a str, ScheduleError> {
    let units: &[&str] = match metric {
        Metric::Latency | Metric::ServerCost | Metric::DeviceCost => &["ms"],
        Metric::Throughput => &["/s", "ips"],
        Metric::Accuracy => &["pp", "%"],
    };
    for u in units {
        if let Some(v) = value.strip_suffix(u) {
            return Ok(v);
        }
    }
    if value.ends_with(|c: char| c.is_ascii_alphabetic() || c == '/' || c == '%') {
        return Err(ScheduleError::Parse(format!("unit in `{text}` does not fit {metric}")));
    }
    Ok(value)
}

fn number(s: &str, text: &str) -> Result<f64, ScheduleError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ScheduleError::Parse(format!("bad number `{s}` in `{text}`")))
}
