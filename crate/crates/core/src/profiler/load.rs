use super::{ProfileDB, ProfilerError};
use crate::graph::NodeId;

/// Load scaling factors: measured over offline time for each side.
/// Both are 1 under calibration conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadState {
    pub sf_client: f64,
    pub sf_server: f64,
}

impl Default for LoadState {
    fn default() -> Self {
        Self { sf_client: 1.0, sf_server: 1.0 }
    }
}

impl LoadState {
    /// Rescales the client from the measured time of prefix `0..=s`.
    pub fn update_client(&mut self, profile: &ProfileDB, measured_ms: f64, split: NodeId) -> Result<f64, ProfilerError> {
        self.sf_client = ratio(measured_ms, profile.prefix_ms(split), split)?;
        Ok(self.sf_client)
    }

    /// Rescales the server from the measured time of suffix `s+1..=N`.
    pub fn update_server(&mut self, profile: &ProfileDB, measured_ms: f64, split: NodeId) -> Result<f64, ProfilerError> {
        self.sf_server = ratio(measured_ms, profile.suffix_ms(split), split)?;
        Ok(self.sf_server)
    }

    pub fn predict_prefix_ms(&self, profile: &ProfileDB, split: NodeId) -> f64 {
        self.sf_client * profile.prefix_ms(split)
    }

    pub fn predict_suffix_ms(&self, profile: &ProfileDB, split: NodeId) -> f64 {
        self.sf_server * profile.suffix_ms(split)
    }
}

fn ratio(measured_ms: f64, offline_ms: f64, split: NodeId) -> Result<f64, ProfilerError> {
    // A zero offline time cannot anchor a scale; neither can a bogus
    // measurement, which would poison every prediction.
    if !(offline_ms > 0.0) || !(measured_ms > 0.0) || !measured_ms.is_finite() {
        return Err(ProfilerError::ZeroOfflineTime { split });
    }
    Ok(measured_ms / offline_ms)
}
