use std::collections::BTreeMap;

use super::ProfilerError;

pub const REALTIME_ALPHA: f64 = 0.5;
pub const HISTORICAL_ALPHA: f64 = 0.05;
/// Real-time averages older than this are ignored.
pub const FRESHNESS_S: f64 = 300.0;

/// Exponential moving average; the first sample initializes it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    alpha: f64,
    value: Option<f64>,
}

impl Ema {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "EMA weight {alpha} outside (0, 1]");
        Self { alpha, value: None }
    }

    pub fn update(&mut self, sample: f64) -> f64 {
        let v = match self.value {
            None => sample,
            Some(prev) => self.alpha * sample + (1.0 - self.alpha) * prev,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Latency (ms, one way) and bandwidth (bytes/s) of a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEstimate {
    pub latency_ms: f64,
    pub bandwidth: f64,
}

impl LinkEstimate {
    pub fn transfer_ms(&self, bytes: f64) -> f64 {
        self.latency_ms + bytes * 1000.0 / self.bandwidth
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Averages {
    latency_ms: Ema,
    bandwidth: Ema,
}

impl Averages {
    fn new(alpha: f64) -> Self {
        Self { latency_ms: Ema::new(alpha), bandwidth: Ema::new(alpha) }
    }
}

/// Real-time and per-network-type historical link averages.
///
/// The real-time pair always describes the current network type; switching
/// types discards it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkEstimate {
    network_type: String,
    realtime: Averages,
    last_obs_s: Option<f64>,
    historical: BTreeMap<String, Averages>,
}

impl NetworkEstimate {
    pub fn new(network_type: &str) -> Self {
        Self {
            network_type: network_type.to_string(),
            realtime: Averages::new(REALTIME_ALPHA),
            last_obs_s: None,
            historical: BTreeMap::new(),
        }
    }

    /// Seeds the historical average of `network_type` before any transfer.
    pub fn seed_historical(&mut self, network_type: &str, link: LinkEstimate) {
        let mut h = Averages::new(HISTORICAL_ALPHA);
        h.latency_ms.update(link.latency_ms);
        h.bandwidth.update(link.bandwidth);
        self.historical.insert(network_type.to_string(), h);
    }

    pub fn network_type(&self) -> &str {
        &self.network_type
    }

    pub fn set_network_type(&mut self, network_type: &str) {
        if network_type != self.network_type {
            self.network_type = network_type.to_string();
            self.realtime = Averages::new(REALTIME_ALPHA);
            self.last_obs_s = None;
        }
    }

    pub fn last_observation_s(&self) -> Option<f64> {
        self.last_obs_s
    }

    pub fn is_fresh(&self, now_s: f64) -> bool {
        self.last_obs_s.is_some_and(|t| now_s - t <= FRESHNESS_S)
    }

    pub fn observe_latency(&mut self, network_type: &str, latency_ms: f64, now_s: f64) {
        self.set_network_type(network_type);
        self.realtime.latency_ms.update(latency_ms);
        self.history(network_type).latency_ms.update(latency_ms);
        self.last_obs_s = Some(now_s);
    }

    pub fn observe_bandwidth(&mut self, network_type: &str, bytes_per_s: f64, now_s: f64) {
        self.set_network_type(network_type);
        self.realtime.bandwidth.update(bytes_per_s);
        self.history(network_type).bandwidth.update(bytes_per_s);
        self.last_obs_s = Some(now_s);
    }

    /// Records a transfer of `bytes` that took `duration_ms` end to end.
    /// Bandwidth is inferred after removing the current latency estimate;
    /// a duration not above that latency carries no bandwidth information
    /// and only refreshes the observation time. Returns the bandwidth
    /// sample, if any.
    pub fn observe_transfer(&mut self, network_type: &str, bytes: usize, duration_ms: f64, now_s: f64) -> Option<f64> {
        self.set_network_type(network_type);
        let latency = self.latency_component(now_s).unwrap_or(0.0);
        let serialization_ms = duration_ms - latency;
        self.last_obs_s = Some(now_s);
        if bytes == 0 || !(serialization_ms > 0.0) {
            return None;
        }
        let sample = bytes as f64 * 1000.0 / serialization_ms;
        self.observe_bandwidth(network_type, sample, now_s);
        Some(sample)
    }

    fn history(&mut self, network_type: &str) -> &mut Averages {
        self.historical
            .entry(network_type.to_string())
            .or_insert_with(|| Averages::new(HISTORICAL_ALPHA))
    }

    fn latency_component(&self, now_s: f64) -> Option<f64> {
        let fresh = self.is_fresh(now_s);
        let h = self.historical.get(&self.network_type);
        fresh
            .then(|| self.realtime.latency_ms.value())
            .flatten()
            .or_else(|| h.and_then(|h| h.latency_ms.value()))
    }

    fn bandwidth_component(&self, now_s: f64) -> Option<f64> {
        let fresh = self.is_fresh(now_s);
        let h = self.historical.get(&self.network_type);
        fresh
            .then(|| self.realtime.bandwidth.value())
            .flatten()
            .or_else(|| h.and_then(|h| h.bandwidth.value()))
            .filter(|b| *b > 0.0)
    }

    /// Real-time components while fresh, historical ones for the current
    /// network type otherwise.
    pub fn current(&self, now_s: f64) -> Result<LinkEstimate, ProfilerError> {
        match (self.latency_component(now_s), self.bandwidth_component(now_s)) {
            (Some(latency_ms), Some(bandwidth)) => Ok(LinkEstimate { latency_ms, bandwidth }),
            _ => Err(ProfilerError::NoEstimate(self.network_type.clone())),
        }
    }

    pub fn estimate_transfer(&self, bytes: f64, now_s: f64) -> Result<f64, ProfilerError> {
        Ok(self.current(now_s)?.transfer_ms(bytes))
    }

    pub fn historical(&self, network_type: &str) -> Option<LinkEstimate> {
        let h = self.historical.get(network_type)?;
        Some(LinkEstimate {
            latency_ms: h.latency_ms.value()?,
            bandwidth: h.bandwidth.value()?,
        })
    }
}
