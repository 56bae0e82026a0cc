use std::time::Instant;

use log::{debug, info};

use super::client::{Client, InferOutcome};
use super::pipeline::{run_pipelined, PipelineReport};
use super::RuntimeError;
use crate::graph::NodeId;
use crate::ispm::Precision;
use crate::profiler::{LinkEstimate, LoadState, NetworkEstimate, ProfileDB};
use crate::scheduler::{schedule, should_reschedule, ConstraintOp, CostInputs, Metric, ScheduleDecision, Slo};
use crate::tensor::Tensor;

/// A response slower than this multiple of the latency bound forces
/// rescheduling regardless of how much the inputs moved.
pub const DEADLINE_MISS_FACTOR: f64 = 2.0;

/// A client that keeps the cost model current from its own measurements
/// and reschedules between inferences.
pub struct Session {
    client: Client,
    profile: ProfileDB,
    slo: Slo,
    space: Vec<(NodeId, Precision)>,
    pipelined: bool,
    net: NetworkEstimate,
    load: LoadState,
    decision: ScheduleDecision,
    /// Inputs at the last scheduler invocation.
    scheduled_with: CostInputs,
    started: Instant,
    reschedules: usize,
}

impl Session {
    /// `seed` is the historical estimate for the client's network type;
    /// the HELLO round trip supplies the first real-time latency.
    pub fn new(
        client: Client,
        profile: ProfileDB,
        slo: Slo,
        space: Vec<(NodeId, Precision)>,
        pipelined: bool,
        seed: LinkEstimate,
    ) -> Result<Self, RuntimeError> {
        let started = Instant::now();
        let kind = client.link().name.clone();
        let mut net = NetworkEstimate::new(&kind);
        net.seed_historical(&kind, seed);
        net.observe_latency(&kind, client.hello_rtt_ms() / 2.0, 0.0);
        let inputs = CostInputs { link: net.current(0.0)?, load: LoadState::default() };
        let decision = schedule(&profile, &space, &slo, &inputs, pipelined)?;
        info!(
            "initial decision: split {} at {} (best effort: {})",
            decision.split, decision.precision, decision.best_effort
        );
        Ok(Self {
            client,
            profile,
            slo,
            space,
            pipelined,
            net,
            load: LoadState::default(),
            decision,
            scheduled_with: inputs,
            started,
            reschedules: 0,
        })
    }

    pub fn decision(&self) -> &ScheduleDecision {
        &self.decision
    }

    pub fn load(&self) -> LoadState {
        self.load
    }

    pub fn network(&self) -> &NetworkEstimate {
        &self.net
    }

    pub fn reschedules(&self) -> usize {
        self.reschedules
    }

    pub fn client_mut(&mut self) -> &mut Client {
        &mut self.client
    }

    fn now_s(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn current_inputs(&self) -> Result<CostInputs, RuntimeError> {
        Ok(CostInputs { link: self.net.current(self.now_s())?, load: self.load })
    }

    /// One unpipelined inference with the current decision; returns the
    /// outcome and whether the decision changed afterwards.
    pub fn infer(&mut self, input: Tensor) -> Result<(InferOutcome, bool), RuntimeError> {
        let d = self.decision;
        let outcome = self.client.infer(input, d.split, self.profile.policy(d.precision))?;
        let t = outcome.timing;
        self.observe(d.split, t.device_ms, t.server_ms, t.request_bytes, t.uplink_ms);
        let changed = self.maybe_reschedule(t.total_ms)?;
        Ok((outcome, changed))
    }

    /// A pipelined batch with the current decision. The batch drains
    /// before any new decision takes effect.
    pub fn run_batch(&mut self, inputs: Vec<Tensor>, warmup: usize) -> Result<(PipelineReport, bool), RuntimeError> {
        let d = self.decision;
        let report = run_pipelined(&mut self.client, inputs, d.split, self.profile.policy(d.precision), warmup)?;
        let s = report.stage_ms;
        self.observe(d.split, s.inference, s.server, report.mean_request_bytes.round() as usize, s.network);
        let worst = report.latency_ms.iter().copied().fold(0.0, f64::max);
        let changed = self.maybe_reschedule(worst)?;
        Ok((report, changed))
    }

    fn observe(&mut self, split: NodeId, device_ms: f64, server_ms: f64, request_bytes: usize, uplink_ms: f64) {
        let now = self.now_s();
        if let Err(e) = self.load.update_client(&self.profile, device_ms, split) {
            debug!("client load not updated: {e}");
        }
        if split < self.profile.output_id() {
            if let Err(e) = self.load.update_server(&self.profile, server_ms, split) {
                debug!("server load not updated: {e}");
            }
            let kind = self.client.link().name.clone();
            self.net.observe_transfer(&kind, request_bytes, uplink_ms, now);
        }
    }

    fn maybe_reschedule(&mut self, observed_latency_ms: f64) -> Result<bool, RuntimeError> {
        let cur = self.current_inputs()?;
        let missed = self.slo.constraints.iter().any(|c| {
            c.metric == Metric::Latency
                && c.op == ConstraintOp::AtMost
                && observed_latency_ms > DEADLINE_MISS_FACTOR * c.threshold
        });
        if !missed && !should_reschedule(&self.scheduled_with, &cur) {
            return Ok(false);
        }
        let next = schedule(&self.profile, &self.space, &self.slo, &cur, self.pipelined)?;
        self.scheduled_with = cur;
        let changed = (next.split, next.precision) != (self.decision.split, self.decision.precision);
        if changed {
            self.reschedules += 1;
            info!(
                "rescheduled to split {} at {} (deadline miss: {missed})",
                next.split, next.precision
            );
        }
        self.decision = next;
        Ok(changed)
    }
}
