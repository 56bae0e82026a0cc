use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use log::{debug, info, warn};

use super::link::ComputeEmulation;
use super::wire::{read_frame, write_frame, ErrorCode, Message, WireError};
use crate::engine::{execute, ExecPlan};
use crate::ispm::{pack, unpack, PackedTensor, PackingPolicy};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct ServerOptions {
    pub compute: ComputeEmulation,
}

#[derive(Debug, Default)]
struct Stats {
    served: u32,
    total_ms: f64,
}

/// Shared by every connection; the stats lock also serializes execution
/// on the model.
struct ServerState {
    model: Arc<Model>,
    options: ServerOptions,
    stats: Mutex<Stats>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

/// Binds `addr` and serves on a background thread.
pub fn spawn_server<A: ToSocketAddrs>(model: Arc<Model>, addr: A, options: ServerOptions) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::Builder::new()
        .name("server-accept".into())
        .spawn(move || serve(listener, model, options, &flag))?;
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve(listener: TcpListener, model: Arc<Model>, options: ServerOptions, stop: &AtomicBool) {
    let state = Arc::new(ServerState { model, options, stats: Mutex::new(Stats::default()) });
    let mut workers = Vec::new();
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let state = state.clone();
                workers.push(thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    if let Err(e) = handle_connection(stream, &state) {
                        debug!("connection {peer:?} ended: {e}");
                    }
                }));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
        workers.retain(|w| !w.is_finished());
    }
    info!("server stopped");
}

fn handle_connection(stream: TcpStream, state: &ServerState) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut send = |m: Message| write_frame(&mut writer, &m.encode());
    let mut greeted = false;
    loop {
        let body = match read_frame(&mut reader) {
            Ok(b) => b,
            Err(WireError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        let request_id = body.get(6..14).map_or(0, |b| u64::from_le_bytes(b.try_into().unwrap()));
        let msg = match Message::decode(&body) {
            Ok(m) => m,
            Err(WireError::Version(v)) => {
                send(error(request_id, ErrorCode::VersionMismatch, format!("protocol version {v} is not supported")))?;
                return Ok(());
            }
            Err(e) => {
                send(error(request_id, ErrorCode::Malformed, e.to_string()))?;
                continue;
            }
        };
        match msg {
            Message::Hello { digest } => {
                if digest != state.model.digest() {
                    send(error(0, ErrorCode::VersionMismatch, "model digest differs from the server's".into()))?;
                    return Ok(());
                }
                greeted = true;
                send(Message::Hello { digest })?;
            }
            _ if !greeted => {
                send(error(request_id, ErrorCode::NotReady, "HELLO required first".into()))?;
                return Ok(());
            }
            Message::InferRequest { request_id, split, tensors } => {
                let reply = match infer(state, split as usize, &tensors) {
                    Ok((logits, server_ms)) => Message::InferResponse {
                        request_id,
                        split,
                        tensors: vec![logits],
                        server_ms: server_ms as f32,
                    },
                    Err((code, msg)) => error(request_id, code, msg),
                };
                send(reply)?;
            }
            Message::FeedbackQuery { request_id } => {
                let stats = state.stats.lock().unwrap();
                let mean = if stats.served == 0 { 0.0 } else { stats.total_ms / stats.served as f64 };
                let reply = Message::Feedback { request_id, served: stats.served, mean_server_ms: mean as f32 };
                drop(stats);
                send(reply)?;
            }
            other => {
                send(error(
                    request_id,
                    ErrorCode::Malformed,
                    format!("unexpected {:?} from a client", other.msg_type()),
                ))?;
            }
        }
    }
}

fn error(request_id: u64, code: ErrorCode, message: String) -> Message {
    Message::Error { request_id, code, message }
}

/// Checks the records against the cut of `split`, then unpacks and resumes
/// execution.
fn infer(state: &ServerState, split: usize, tensors: &[PackedTensor]) -> Result<(PackedTensor, f64), (ErrorCode, String)> {
    let model = &state.model;
    let graph = model.graph();
    let last = graph.output_id();
    if split >= last {
        return Err((ErrorCode::Malformed, format!("split {split} leaves nothing for the server")));
    }
    let expected = graph
        .split_dependencies(split)
        .map_err(|e| (ErrorCode::Malformed, e.to_string()))?
        .dep_ids;
    let got: Vec<usize> = tensors.iter().map(|t| t.dep_id).collect();
    if got != expected {
        return Err((
            ErrorCode::Malformed,
            format!("split {split} needs dependencies {expected:?}, request carries {got:?}"),
        ));
    }
    for t in tensors {
        if t.shape != model.shape(t.dep_id) {
            return Err((
                ErrorCode::Malformed,
                format!("dependency {} has shape {:?}, expected {:?}", t.dep_id, t.shape, model.shape(t.dep_id)),
            ));
        }
    }

    let mut stats = state.stats.lock().unwrap();
    let started = Instant::now();
    let deps = tensors
        .iter()
        .map(|t| Ok((t.dep_id, unpack(t)?)))
        .collect::<Result<BTreeMap<usize, Tensor>, crate::ispm::IspmError>>()
        .map_err(|e| (ErrorCode::Malformed, e.to_string()))?;
    let mut exec = execute(model, &ExecPlan::server(graph, split, deps)).map_err(|e| (ErrorCode::Execution, e.to_string()))?;
    let server_ms = state.options.compute.pad(started);
    stats.served += 1;
    stats.total_ms += server_ms;
    drop(stats);

    let logits = exec.outputs.remove(&last).expect("server range ends at the output");
    let record = pack(last, &logits, PackingPolicy::passthrough()).map_err(|e| (ErrorCode::Execution, e.to_string()))?;
    Ok((record, server_ms))
}
