use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Instant;

use super::link::{sleep_until, ComputeEmulation, LinkEmulator, LinkModel};
use super::wire::{frame_len, read_frame, write_frame, Message};
use super::RuntimeError;
use crate::engine::{execute, ExecPlan};
use crate::graph::NodeId;
use crate::ispm::{pack, unpack, PackedTensor, PackingPolicy, Precision};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub link: LinkModel,
    /// Maximum latency jitter in ms and its seed.
    pub jitter: Option<(f64, u64)>,
    pub compute: ComputeEmulation,
}

impl ClientOptions {
    pub fn new(link: LinkModel) -> Self {
        Self { link, jitter: None, compute: ComputeEmulation::None }
    }
}

/// Per-inference measurements fed back to the profiler.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timing {
    /// Client compute including emulated slowdown.
    pub device_ms: f64,
    /// Client compute as actually measured.
    pub compute_ms: f64,
    pub pack_ms: f64,
    /// Emulated one-way time of the request, up to its hand-off to the
    /// transport.
    pub uplink_ms: f64,
    pub server_ms: f64,
    pub downlink_ms: f64,
    pub total_ms: f64,
    pub request_bytes: usize,
    pub response_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub logits: Tensor,
    pub timing: Timing,
}

/// Runs nodes `0..=split` and returns the tensors that cross the cut (or
/// the logits when `split` is the output), with the padded and actual
/// compute time.
pub fn run_prefix(
    model: &Model,
    input: Tensor,
    split: NodeId,
    compute: ComputeEmulation,
) -> Result<(BTreeMap<NodeId, Tensor>, f64, f64), RuntimeError> {
    let started = Instant::now();
    let exec = execute(model, &ExecPlan::client(split, input))?;
    let compute_ms = started.elapsed().as_secs_f64() * 1e3;
    let device_ms = compute.pad(started);
    Ok((exec.outputs, device_ms, compute_ms))
}

pub fn pack_all(deps: &BTreeMap<NodeId, Tensor>, policy: PackingPolicy) -> Result<(Vec<PackedTensor>, f64), RuntimeError> {
    let started = Instant::now();
    let packed = deps
        .iter()
        .map(|(&id, t)| pack(id, t, policy))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((packed, started.elapsed().as_secs_f64() * 1e3))
}

/// Extracts the logits and server time from a response to `request_id`.
pub fn read_response(msg: Message, request_id: u64, output: NodeId) -> Result<(Tensor, f64), RuntimeError> {
    match msg {
        Message::InferResponse { request_id: id, tensors, server_ms, .. } if id == request_id => {
            match tensors.as_slice() {
                [t] if t.dep_id == output && t.precision == Precision::Passthrough => {
                    Ok((unpack(t)?, server_ms as f64))
                }
                _ => Err(RuntimeError::Protocol("response must carry exactly the raw logits".into())),
            }
        }
        Message::InferResponse { request_id: id, .. } => Err(RuntimeError::Protocol(format!(
            "response to request {id} while waiting for {request_id}"
        ))),
        Message::Error { code, message, .. } => Err(RuntimeError::Remote { code, message }),
        other => Err(RuntimeError::Protocol(format!("unexpected {:?}", other.msg_type()))),
    }
}

/// One connection to a server, with the emulated link applied to every
/// message in both directions.
pub struct Client {
    model: Arc<Model>,
    pub(super) stream: TcpStream,
    pub(super) reader: BufReader<TcpStream>,
    pub(super) writer: BufWriter<TcpStream>,
    pub(super) link: Arc<LinkEmulator>,
    compute: ComputeEmulation,
    next_id: u64,
    hello_rtt_ms: f64,
}

impl Client {
    /// Connects and exchanges HELLO; fails if the server runs a different
    /// model.
    pub fn connect<A: ToSocketAddrs>(addr: A, model: Arc<Model>, options: ClientOptions) -> Result<Self, RuntimeError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let link = Arc::new(match options.jitter {
            Some((max_ms, seed)) => LinkEmulator::with_jitter(options.link.clone(), max_ms, seed),
            None => LinkEmulator::new(options.link.clone()),
        });
        let mut client = Self {
            model,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream.try_clone()?),
            stream,
            link,
            compute: options.compute,
            next_id: 1,
            hello_rtt_ms: 0.0,
        };
        let digest = client.model.digest();
        let started = Instant::now();
        let (reply, _, _) = client.round_trip(&Message::Hello { digest })?;
        client.hello_rtt_ms = started.elapsed().as_secs_f64() * 1e3;
        match reply {
            Message::Hello { digest: d } if d == digest => Ok(client),
            Message::Error { code, message, .. } => Err(RuntimeError::Remote { code, message }),
            other => Err(RuntimeError::Protocol(format!("expected HELLO, got {:?}", other.msg_type()))),
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn link(&self) -> &LinkModel {
        self.link.model()
    }

    pub fn compute(&self) -> ComputeEmulation {
        self.compute
    }

    pub fn set_compute(&mut self, compute: ComputeEmulation) {
        self.compute = compute;
    }

    /// Round-trip time of the HELLO exchange; half of it estimates the
    /// one-way latency.
    pub fn hello_rtt_ms(&self) -> f64 {
        self.hello_rtt_ms
    }

    pub(super) fn next_request_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub(super) fn advance_request_ids(&mut self, n: u64) {
        self.next_id += n;
    }

    /// Sends `msg` over the emulated uplink and waits for the reply.
    /// Returns the reply with the uplink and downlink times.
    fn round_trip(&mut self, msg: &Message) -> Result<(Message, f64, f64), RuntimeError> {
        let (uplink_ms, _) = self.send(msg)?;
        let (reply, downlink_ms, _) = self.receive()?;
        Ok((reply, uplink_ms, downlink_ms))
    }

    fn send(&mut self, msg: &Message) -> Result<(f64, usize), RuntimeError> {
        let body = msg.encode();
        let started = Instant::now();
        self.link.transmit(frame_len(&body));
        // Measured up to the hand-off: on a loaded host the writer may be
        // descheduled once the peer wakes, which is not link time.
        let uplink_ms = started.elapsed().as_secs_f64() * 1e3;
        write_frame(&mut self.writer, &body)?;
        Ok((uplink_ms, frame_len(&body)))
    }

    fn receive(&mut self) -> Result<(Message, f64, usize), RuntimeError> {
        let body = read_frame(&mut self.reader)?;
        let arrived = Instant::now();
        sleep_until(arrived + self.link.delay(frame_len(&body)));
        let downlink_ms = arrived.elapsed().as_secs_f64() * 1e3;
        Ok((Message::decode(&body)?, downlink_ms, frame_len(&body)))
    }

    /// Runs the prefix, ships the cut and returns the logits. When `split`
    /// is the output node nothing is sent.
    pub fn infer(&mut self, input: Tensor, split: NodeId, policy: PackingPolicy) -> Result<InferOutcome, RuntimeError> {
        let started = Instant::now();
        let output = self.model.graph().output_id();
        let (mut deps, device_ms, compute_ms) = run_prefix(&self.model, input, split, self.compute)?;
        let mut timing = Timing { device_ms, compute_ms, ..Timing::default() };
        if split == output {
            timing.total_ms = started.elapsed().as_secs_f64() * 1e3;
            let logits = deps.remove(&output).expect("client-only run yields logits");
            return Ok(InferOutcome { logits, timing });
        }
        let (tensors, pack_ms) = pack_all(&deps, policy)?;
        timing.pack_ms = pack_ms;
        let request_id = self.next_request_id();
        let request = Message::InferRequest { request_id, split: split as u32, tensors };
        let (uplink_ms, request_bytes) = self.send(&request)?;
        let (reply, downlink_ms, response_bytes) = self.receive()?;
        let (logits, server_ms) = read_response(reply, request_id, output)?;
        timing.uplink_ms = uplink_ms;
        timing.downlink_ms = downlink_ms;
        timing.server_ms = server_ms;
        timing.request_bytes = request_bytes;
        timing.response_bytes = response_bytes;
        timing.total_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(InferOutcome { logits, timing })
    }

    /// Server-side request count and mean compute time.
    pub fn feedback(&mut self) -> Result<(u32, f32), RuntimeError> {
        let request_id = self.next_request_id();
        match self.round_trip(&Message::FeedbackQuery { request_id })?.0 {
            Message::Feedback { served, mean_server_ms, .. } => Ok((served, mean_server_ms)),
            Message::Error { code, message, .. } => Err(RuntimeError::Remote { code, message }),
            other => Err(RuntimeError::Protocol(format!("expected feedback, got {:?}", other.msg_type()))),
        }
    }

    /// Sends a raw, possibly invalid, body and returns the decoded reply.
    pub fn send_raw(&mut self, body: &[u8]) -> Result<Message, RuntimeError> {
        write_frame(&mut self.writer, body)?;
        Ok(self.receive()?.0)
    }

    pub fn close(self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
