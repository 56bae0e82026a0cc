//! Parameter sweeps over one axis comparing the adaptive scheduler with
//! fixed baselines, with optional live measurement over an emulated link.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::graph::NodeId;
use crate::ispm::Precision;
use crate::model::Model;
use crate::profiler::{LoadState, ProfileDB};
use crate::runtime::{
    run_pipelined, spawn_server, Client, ClientOptions, ComputeEmulation, LinkModel, RuntimeError, ServerOptions,
};
use crate::scheduler::{
    full_space, neurosurgeon, predict_metrics, schedule, ConstraintOp, CostInputs, HardConstraint, Metric,
    MetricVector, ScheduleDecision, ScheduleError, Slo,
};
use crate::tensor::Tensor;

/// Identifies the column layout of sweep CSV files.
pub const SWEEP_SCHEMA: &str = "onloadrt-sweep-v1";

pub const CSV_HEADER: [&str; 17] = [
    "schema",
    "axis",
    "point",
    "variant",
    "split",
    "precision",
    "best_effort",
    "latency_ms",
    "throughput",
    "server_cost_ms",
    "device_cost_ms",
    "net_ms",
    "accuracy_pp",
    "server_savings_pct",
    "measured_throughput",
    "measured_latency_ms",
    "measured_wall_ms",
];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Link bandwidth in Mbit/s.
    Bandwidth,
    /// Multiplier on the client load factor.
    ClientSlowdown,
    /// Latency bound in ms.
    Deadline,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::ClientSlowdown => "client-slowdown",
            SweepAxis::Deadline => "deadline",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            "client-slowdown" => Ok(SweepAxis::ClientSlowdown),
            "deadline" => Ok(SweepAxis::Deadline),
            other => Err(SweepError::Spec(format!("unknown axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The full space under the sweep's constraints and targets.
    Dyno,
    /// Passthrough only, minimum latency, no constraints.
    Neurosurgeon,
    /// Every layer on the client.
    ClientOnly,
    /// Every layer on the server, bitwidth chosen under the sweep's SLO.
    ServerOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dyno, Variant::Neurosurgeon, Variant::ClientOnly, Variant::ServerOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dyno => "dyno",
            Variant::Neurosurgeon => "neurosurgeon",
            Variant::ClientOnly => "client-only",
            Variant::ServerOnly => "server-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Non-empty, finite, positive and non-decreasing.
    pub points: Vec<f64>,
    /// The link at every point; the bandwidth axis replaces its bandwidth.
    pub link: LinkModel,
    /// The load at every point; the slowdown axis multiplies `sf_client`.
    pub load: LoadState,
    /// The deadline axis replaces any latency upper bound with the point.
    pub slo: Slo,
    pub pipelined: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.points.is_empty() {
            return Err(SweepError::Spec("no points".into()));
        }
        if self.points.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(SweepError::Spec("points must be finite and positive".into()));
        }
        if self.points.windows(2).any(|w| w[0] > w[1]) {
            return Err(SweepError::Spec("points must be sorted".into()));
        }
        self.slo.validate()?;
        Ok(())
    }

    /// The link, load and SLO in effect at `point`.
    pub fn scenario(&self, point: f64) -> Result<(LinkModel, LoadState, Slo), SweepError> {
        let mut link = self.link.clone();
        let mut load = self.load;
        let mut slo = self.slo.clone();
        match self.axis {
            SweepAxis::Bandwidth => {
                link = LinkModel::from_mbps(&link.name, point, link.latency_ms).map_err(SweepError::Spec)?;
            }
            SweepAxis::ClientSlowdown => load.sf_client *= point,
            SweepAxis::Deadline => {
                slo.constraints
                    .retain(|c| !(c.metric == Metric::Latency && c.op == ConstraintOp::AtMost));
                slo.constraints
                    .insert(0, HardConstraint::new(Metric::Latency, ConstraintOp::AtMost, point));
            }
        }
        Ok((link, load, slo))
    }
}

/// Wall-clock results of a live run; never part of the deterministic
/// columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub throughput: f64,
    pub mean_latency_ms: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: f64,
    pub variant: Variant,
    pub split: NodeId,
    pub precision: Precision,
    pub best_effort: bool,
    pub predicted: MetricVector,
    /// Server compute saved relative to running every layer remotely.
    pub server_savings_pct: f64,
    pub measured: Option<Measured>,
}

/// Inputs for measuring each selected configuration over loopback.
pub struct LiveSpec {
    pub model: Arc<Model>,
    pub inputs: Vec<Tensor>,
    /// Completions excluded from the steady-state rate.
    pub warmup: usize,
}

fn decide(
    profile: &ProfileDB,
    variant: Variant,
    slo: &Slo,
    inputs: &CostInputs,
    pipelined: bool,
) -> Result<ScheduleDecision, SweepError> {
    let last = profile.output_id();
    let fixed = |split: NodeId, precision: Precision| -> Result<ScheduleDecision, SweepError> {
        Ok(ScheduleDecision {
            split,
            precision,
            predicted: predict_metrics(profile, inputs, split, precision, pipelined)?,
            best_effort: false,
        })
    };
    match variant {
        Variant::Dyno => Ok(schedule(profile, &full_space(profile), slo, inputs, pipelined)?),
        Variant::Neurosurgeon => {
            let d = neurosurgeon(profile, inputs)?;
            // Reported in the sweep's execution mode so every variant is
            // compared on the same throughput definition.
            fixed(d.split, d.precision)
        }
        Variant::ClientOnly => fixed(last, profile.precisions[0]),
        Variant::ServerOnly => {
            let space: Vec<(NodeId, Precision)> = profile.precisions.iter().map(|&p| (0, p)).collect();
            Ok(schedule(profile, &space, slo, inputs, pipelined)?)
        }
    }
}

pub fn server_savings_pct(profile: &ProfileDB, load: &LoadState, server_cost: f64) -> f64 {
    let full = load.sf_server * profile.suffix_ms(0);
    if full <= 0.0 {
        return 0.0;
    }
    100.0 * (1.0 - server_cost / full)
}

/// One row per point per variant, in point order then `Variant::ALL`
/// order. With `live`, each selected configuration is also run over an
/// in-process server with the point's link emulated.
pub fn run_sweep(profile: &ProfileDB, spec: &SweepSpec, live: Option<&LiveSpec>) -> Result<Vec<SweepRow>, SweepError> {
    spec.validate()?;
    profile.validate().map_err(ScheduleError::from)?;
    let harness = live.map(|l| LiveHarness::start(profile, l)).transpose()?;
    let mut rows = Vec::with_capacity(spec.points.len() * Variant::ALL.len());
    for &point in &spec.points {
        let (link, load, slo) = spec.scenario(point)?;
        let inputs = CostInputs { link: link.estimate(), load };
        for variant in Variant::ALL {
            let d = decide(profile, variant, &slo, &inputs, spec.pipelined)?;
            let measured = match &harness {
                Some(h) => Some(h.measure(profile, &link, &load, &d, spec.pipelined)?),
                None => None,
            };
            rows.push(SweepRow {
                point,
                variant,
                split: d.split,
                precision: d.precision,
                best_effort: d.best_effort,
                predicted: d.predicted,
                server_savings_pct: server_savings_pct(profile, &load, d.predicted.server_cost),
                measured,
            });
        }
    }
    Ok(rows)
}

struct LiveHarness<'a> {
    spec: &'a LiveSpec,
}

impl<'a> LiveHarness<'a> {
    fn start(profile: &ProfileDB, spec: &'a LiveSpec) -> Result<Self, SweepError> {
        if spec.model.digest() != profile.model_digest {
            return Err(SweepError::Spec("profile was calibrated for a different model".into()));
        }
        if spec.inputs.len() <= spec.warmup + 1 {
            return Err(SweepError::Spec("live runs need more inputs than warm-up requests".into()));
        }
        Ok(Self { spec })
    }

    fn measure(
        &self,
        profile: &ProfileDB,
        link: &LinkModel,
        load: &LoadState,
        d: &ScheduleDecision,
        pipelined: bool,
    ) -> Result<Measured, SweepError> {
        // Both sides are padded to their scaled calibrated times rather
        // than stretching live measurements, which on a shared host
        // include time the other side held the CPU.
        let server_compute = ComputeEmulation::FixedMs(load.sf_server * profile.suffix_ms(d.split));
        let server = spawn_server(self.spec.model.clone(), "127.0.0.1:0", ServerOptions { compute: server_compute })
            .map_err(RuntimeError::from)?;
        let mut options = ClientOptions::new(link.clone());
        options.compute = ComputeEmulation::FixedMs(load.sf_client * profile.prefix_ms(d.split));
        let mut client = Client::connect(server.addr(), self.spec.model.clone(), options)?;
        let policy = profile.policy(d.precision);
        let inputs = self.spec.inputs.clone();
        let measured = if pipelined {
            let report = run_pipelined(&mut client, inputs, d.split, policy, self.spec.warmup)?;
            let tail = &report.latency_ms[self.spec.warmup..];
            Measured {
                throughput: report.throughput,
                mean_latency_ms: tail.iter().sum::<f64>() / tail.len() as f64,
                wall_ms: report.wall_ms,
            }
        } else {
            let started = Instant::now();
            let mut latencies = Vec::with_capacity(inputs.len());
            for input in inputs {
                latencies.push(client.infer(input, d.split, policy)?.timing.total_ms);
            }
            let tail = &latencies[self.spec.warmup..];
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            Measured {
                throughput: 1000.0 / mean,
                mean_latency_ms: mean,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            }
        };
        client.close();
        server.shutdown();
        Ok(measured)
    }
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        v.to_string()
    }
}

/// Writes the header and one record per row.
pub fn write_csv<W: Write>(axis: SweepAxis, rows: &[SweepRow], out: W) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let m = &r.predicted;
        let (mt, ml, mw) = match r.measured {
            Some(x) => (cell(x.throughput), cell(x.mean_latency_ms), cell(x.wall_ms)),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            SWEEP_SCHEMA.to_string(),
            axis.name().to_string(),
            cell(r.point),
            r.variant.name().to_string(),
            r.split.to_string(),
            r.precision.to_string(),
            r.best_effort.to_string(),
            cell(m.latency),
            cell(m.throughput),
            cell(m.server_cost),
            cell(m.device_cost),
            cell(m.net),
            cell(m.accuracy),
            cell(r.server_savings_pct),
            mt,
            ml,
            mw,
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
