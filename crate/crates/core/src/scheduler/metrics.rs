use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::ScheduleError;
use crate::graph::NodeId;
use crate::ispm::Precision;
use crate::profiler::{LinkEstimate, LoadState, ProfileDB};

/// Stage times below this are treated as this, keeping throughput finite.
const MIN_STAGE_MS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Latency,
    Throughput,
    ServerCost,
    DeviceCost,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Latency,
        Metric::Throughput,
        Metric::ServerCost,
        Metric::DeviceCost,
        Metric::Accuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Latency => "latency",
            Metric::Throughput => "throughput",
            Metric::ServerCost => "server_cost",
            Metric::DeviceCost => "device_cost",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ScheduleError::Parse(format!("unknown metric `{s}`")))
    }
}

/// Predicted metrics of one configuration. Times in ms, throughput in
/// inferences/s, accuracy as a loss in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricVector {
    pub latency: f64,
    pub throughput: f64,
    pub server_cost: f64,
    pub device_cost: f64,
    pub accuracy: f64,
    /// Network stage time; not a schedulable metric.
    pub net: f64,
}

impl MetricVector {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Latency => self.latency,
            Metric::Throughput => self.throughput,
            Metric::ServerCost => self.server_cost,
            Metric::DeviceCost => self.device_cost,
            Metric::Accuracy => self.accuracy,
        }
    }
}

/// Live inputs to the cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostInputs {
    pub link: LinkEstimate,
    pub load: LoadState,
}

pub fn predict_metrics(
    profile: &ProfileDB,
    inputs: &CostInputs,
    split: NodeId,
    precision: Precision,
    pipelined: bool,
) -> Result<MetricVector, ScheduleError> {
    let entry = profile.entry(split, precision)?;
    Ok(combine(
        profile.prefix_ms(split),
        profile.suffix_ms(split),
        split == profile.output_id(),
        entry.pack_ms,
        entry.dep_bytes,
        entry.acc_delta,
        inputs,
        pipelined,
    ))
}

#[allow(clippy::too_many_arguments)]
fn combine(
    prefix_ms: f64,
    suffix_ms: f64,
    client_only: bool,
    pack_ms: f64,
    dep_bytes: f64,
    acc_delta: f64,
    inputs: &CostInputs,
    pipelined: bool,
) -> MetricVector {
    let device_cost = inputs.load.sf_client * prefix_ms + pack_ms;
    let (net, server_cost) = if client_only {
        (0.0, 0.0)
    } else {
        (inputs.link.transfer_ms(dep_bytes), inputs.load.sf_server * suffix_ms)
    };
    let latency = device_cost + net + server_cost;
    let bottleneck = if pipelined { device_cost.max(net).max(server_cost) } else { latency };
    MetricVector {
        latency,
        throughput: 1000.0 / bottleneck.max(MIN_STAGE_MS),
        server_cost,
        device_cost,
        accuracy: acc_delta,
        net,
    }
}

/// A configuration with its predicted metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub split: NodeId,
    pub precision: Precision,
    pub metrics: MetricVector,
}

/// Every configuration of the profile, in grid order.
pub fn full_space(profile: &ProfileDB) -> Vec<(NodeId, Precision)> {
    profile.configs().map(|(s, p, _)| (s, p)).collect()
}

/// Recomputes the metrics of every configuration in `space`. Offline sums
/// are computed once per distinct split.
pub fn evaluate_space(
    profile: &ProfileDB,
    space: &[(NodeId, Precision)],
    inputs: &CostInputs,
    pipelined: bool,
) -> Result<Vec<Candidate>, ScheduleError> {
    let last = profile.output_id();
    let mut sums: HashMap<NodeId, (f64, f64)> = HashMap::new();
    space
        .iter()
        .map(|&(split, precision)| {
            let entry = profile.entry(split, precision)?;
            let &mut (prefix, suffix) = sums
                .entry(split)
                .or_insert_with(|| (profile.prefix_ms(split), profile.suffix_ms(split)));
            let metrics = combine(
                prefix,
                suffix,
                split == last,
                entry.pack_ms,
                entry.dep_bytes,
                entry.acc_delta,
                inputs,
                pipelined,
            );
            Ok(Candidate { split, precision, metrics })
        })
        .collect()
}
