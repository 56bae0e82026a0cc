//! Distributed execution over TCP: a server that resumes inference from
//! received dependency tensors, a client with an emulated link, a
//! three-stage client pipeline and an adaptive session that reschedules
//! from live measurements.

mod client;
pub mod link;
mod pipeline;
mod server;
mod session;
pub mod wire;

use thiserror::Error;

use crate::engine::EngineError;
use crate::ispm::IspmError;
use crate::profiler::ProfilerError;
use crate::scheduler::ScheduleError;

pub use client::{pack_all, run_prefix, Client, ClientOptions, InferOutcome, Timing};
pub use link::{ComputeEmulation, LinkEmulator, LinkModel};
pub use pipeline::{run_pipelined, steady_throughput, PipelineReport, StageTimes, QUEUE_CAPACITY};
pub use server::{serve, spawn_server, ServerHandle, ServerOptions};
pub use session::{Session, DEADLINE_MISS_FACTOR};
pub use wire::{ErrorCode, Message, WireError};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("network error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server error ({code:?}): {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ispm(#[from] IspmError),
    #[error(transparent)]
    Profile(#[from] ProfilerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}
