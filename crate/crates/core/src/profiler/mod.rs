//! Cost model for ⟨split, precision⟩ configurations.
//!
//! Offline calibration fills a [`ProfileDB`] with per-layer times, packing
//! times, packed dependency sizes and accuracy deltas. At run time a
//! [`LoadState`] rescales the offline layer times and a
//! [`NetworkEstimate`] tracks link latency and bandwidth.

mod calibrate;
mod load;
mod network;
pub(crate) mod profile;

use thiserror::Error;

use crate::engine::EngineError;
use crate::graph::NodeId;
use crate::ispm::{IspmError, Precision};

pub use calibrate::{calibrate, CalibrationSpec};
pub use load::LoadState;
pub use network::{Ema, LinkEstimate, NetworkEstimate, FRESHNESS_S, HISTORICAL_ALPHA, REALTIME_ALPHA};
pub use profile::{policy_for, ConfigProfile, ProfileDB, PROFILE_MAGIC, PROFILE_VERSION};

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ispm(#[from] IspmError),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("offline prefix time for split {split} is zero")]
    ZeroOfflineTime { split: NodeId },
    #[error("no latency/bandwidth estimate for network type `{0}`")]
    NoEstimate(String),
    #[error("profile has no entry for split {split} at precision {precision}")]
    MissingEntry { split: NodeId, precision: Precision },
    #[error("malformed profile: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
