//! Three client stages (inference, packing, network) connected by bounded
//! queues, plus a receiver that matches responses to requests in order.

use std::collections::BTreeMap;
use std::net::Shutdown;
use std::sync::mpsc::{channel, sync_channel};
use std::thread;
use std::time::Instant;

use super::client::{pack_all, read_response, run_prefix, Client};
use super::link::sleep_until;
use super::wire::{frame_len, read_frame, write_frame, Message};
use super::RuntimeError;
use crate::graph::NodeId;
use crate::ispm::{PackedTensor, PackingPolicy};
use crate::tensor::Tensor;

pub const QUEUE_CAPACITY: usize = 2;

/// Logits, completion times, latencies, server busy ms and request bytes.
type Received = (Vec<Tensor>, Vec<f64>, Vec<f64>, f64, usize);

/// Mean busy time per request of each stage, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub inference: f64,
    pub packing: f64,
    pub network: f64,
    pub server: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    /// Logits in input order.
    pub outputs: Vec<Tensor>,
    /// Completion time of each request since the run started.
    pub completed_ms: Vec<f64>,
    /// Submission to completion, per request.
    pub latency_ms: Vec<f64>,
    pub warmup: usize,
    /// Requests per second after the warm-up.
    pub throughput: f64,
    pub stage_ms: StageTimes,
    /// Fraction of the wall time each stage was busy.
    pub occupancy: StageTimes,
    pub wall_ms: f64,
    pub mean_request_bytes: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Steady-state rate: requests completed after the `warmup`-th, over the
/// time since it completed.
pub fn steady_throughput(completed_ms: &[f64], warmup: usize) -> f64 {
    let n = completed_ms.len();
    if n == 0 {
        return 0.0;
    }
    if warmup + 1 >= n {
        return n as f64 * 1000.0 / completed_ms[n - 1].max(f64::MIN_POSITIVE);
    }
    (n - 1 - warmup) as f64 * 1000.0 / (completed_ms[n - 1] - completed_ms[warmup]).max(f64::MIN_POSITIVE)
}

/// Streams `inputs` through the pipeline with a fixed configuration and
/// returns once every request has completed.
pub fn run_pipelined(
    client: &mut Client,
    inputs: Vec<Tensor>,
    split: NodeId,
    policy: PackingPolicy,
    warmup: usize,
) -> Result<PipelineReport, RuntimeError> {
    let n = inputs.len();
    let model = client.model().clone();
    let compute = client.compute();
    let output = model.graph().output_id();
    let started = Instant::now();

    if split == output {
        let mut outputs = Vec::with_capacity(n);
        let mut completed_ms = Vec::with_capacity(n);
        let mut latency_ms = Vec::with_capacity(n);
        let mut busy = 0.0;
        for input in inputs {
            let t0 = Instant::now();
            let (mut deps, device_ms, _) = run_prefix(&model, input, split, compute)?;
            busy += device_ms;
            outputs.push(deps.remove(&output).expect("client-only run yields logits"));
            completed_ms.push(ms_since(started));
            latency_ms.push(ms_since(t0));
        }
        let wall_ms = ms_since(started);
        let per = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
        return Ok(PipelineReport {
            throughput: steady_throughput(&completed_ms, warmup),
            outputs,
            completed_ms,
            latency_ms,
            warmup,
            stage_ms: StageTimes { inference: per(busy), ..StageTimes::default() },
            occupancy: StageTimes { inference: busy / wall_ms.max(f64::MIN_POSITIVE), ..StageTimes::default() },
            wall_ms,
            mean_request_bytes: 0.0,
        });
    }

    let first_id = client.next_request_id();
    client.advance_request_ids(n.saturating_sub(1) as u64);
    let link = client.link.clone();
    let killer = client.stream.try_clone()?;
    let killer_rx = client.stream.try_clone()?;
    let reader = &mut client.reader;
    let writer = &mut client.writer;

    let (to_pack, packing_in) = sync_channel::<(usize, Instant, BTreeMap<NodeId, Tensor>)>(QUEUE_CAPACITY);
    let (to_send, sending_in) = sync_channel::<(usize, Instant, Instant, Vec<PackedTensor>)>(QUEUE_CAPACITY);
    // Unbounded: at most one entry per request in flight on the wire.
    let (announce, announced) = channel::<(usize, Instant, usize)>();
    let (to_deliver, arrivals) = channel::<Result<(Instant, Vec<u8>), RuntimeError>>();

    thread::scope(|scope| {
        let inference = scope.spawn(move || -> Result<f64, RuntimeError> {
            let mut busy = 0.0;
            for (i, input) in inputs.into_iter().enumerate() {
                let t0 = Instant::now();
                let (deps, device_ms, _) = run_prefix(&model, input, split, compute)?;
                busy += device_ms;
                if to_pack.send((i, t0, deps)).is_err() {
                    break;
                }
            }
            Ok(busy)
        });

        let packing = scope.spawn(move || -> Result<f64, RuntimeError> {
            let mut busy = 0.0;
            for (i, t0, deps) in packing_in {
                let (tensors, ms) = pack_all(&deps, policy)?;
                busy += ms;
                if to_send.send((i, t0, Instant::now(), tensors)).is_err() {
                    break;
                }
            }
            Ok(busy)
        });

        let uplink = link.clone();
        let network = scope.spawn(move || -> Result<f64, RuntimeError> {
            let mut busy = 0.0;
            let result = (|| {
                for (i, t0, ready, tensors) in sending_in {
                    let body = Message::InferRequest {
                        request_id: first_id + i as u64,
                        split: split as u32,
                        tensors,
                    }
                    .encode();
                    let _ = announce.send((i, t0, frame_len(&body)));
                    busy += uplink.transmit_from(ready, frame_len(&body)).as_secs_f64() * 1e3;
                    write_frame(writer, &body)?;
                }
                Ok(busy)
            })();
            if result.is_err() {
                let _ = killer.shutdown(Shutdown::Both);
            }
            result
        });

        // Stamps arrivals as they come off the socket so that responses
        // propagate back concurrently rather than one delay at a time.
        let reading = scope.spawn(move || {
            for _ in 0..n {
                let frame = read_frame(reader).map(|body| (Instant::now(), body));
                let failed = frame.is_err();
                if to_deliver.send(frame.map_err(RuntimeError::from)).is_err() || failed {
                    break;
                }
            }
        });

        let receiver = (|| -> Result<Received, RuntimeError> {
            let mut outputs = Vec::with_capacity(n);
            let mut completed_ms = Vec::with_capacity(n);
            let mut latency_ms = Vec::with_capacity(n);
            let mut server_busy = 0.0;
            let mut bytes = 0;
            for (i, t0, sent_bytes) in announced.iter() {
                let (arrived, body) = arrivals
                    .recv()
                    .map_err(|_| RuntimeError::Protocol("response reader stopped".into()))??;
                sleep_until(arrived + link.delay(frame_len(&body)));
                let (logits, server_ms) = read_response(Message::decode(&body)?, first_id + i as u64, output)?;
                server_busy += server_ms;
                bytes += sent_bytes;
                outputs.push(logits);
                completed_ms.push(ms_since(started));
                latency_ms.push(ms_since(t0));
            }
            Ok((outputs, completed_ms, latency_ms, server_busy, bytes))
        })();
        if receiver.is_err() {
            let _ = killer_rx.shutdown(Shutdown::Both);
        }
        reading.join().expect("reader panicked");

        let inference = inference.join().expect("inference stage panicked");
        let packing = packing.join().expect("packing stage panicked");
        let network = network.join().expect("network stage panicked");
        let (outputs, completed_ms, latency_ms, server_busy, bytes) = receiver?;
        let (inference, packing, network) = (inference?, packing?, network?);
        if outputs.len() != n {
            return Err(RuntimeError::Protocol(format!("{} of {n} requests completed", outputs.len())));
        }
        let wall_ms = ms_since(started);
        let per = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
        let frac = |v: f64| v / wall_ms.max(f64::MIN_POSITIVE);
        Ok(PipelineReport {
            throughput: steady_throughput(&completed_ms, warmup),
            outputs,
            completed_ms,
            latency_ms,
            warmup,
            stage_ms: StageTimes {
                inference: per(inference),
                packing: per(packing),
                network: per(network),
                server: per(server_busy),
            },
            occupancy: StageTimes {
                inference: frac(inference),
                packing: frac(packing),
                network: frac(network),
                server: frac(server_busy),
            },
            wall_ms,
            mean_request_bytes: per(bytes as f64),
        })
    })
}
