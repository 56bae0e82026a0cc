//! Link and compute emulation.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::profiler::LinkEstimate;

/// Bandwidth in bytes/s, one-way latency in ms, and a network-type tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub name: String,
    pub bandwidth: f64,
    pub latency_ms: f64,
}

pub const PRESETS: [(&str, f64, f64); 4] = [
    ("ethernet", 1000.0, 0.5),
    ("wifi", 400.0, 2.0),
    ("4g", 20.0, 50.0),
    ("3g", 2.0, 100.0),
];

impl LinkModel {
    pub fn new(name: &str, bandwidth: f64, latency_ms: f64) -> Result<Self, String> {
        if !(bandwidth > 0.0) {
            return Err(format!("link `{name}`: bandwidth must be positive, got {bandwidth}"));
        }
        if !(latency_ms >= 0.0) || !latency_ms.is_finite() {
            return Err(format!("link `{name}`: latency must be non-negative, got {latency_ms}"));
        }
        Ok(Self { name: name.to_string(), bandwidth, latency_ms })
    }

    pub fn from_mbps(name: &str, mbps: f64, latency_ms: f64) -> Result<Self, String> {
        Self::new(name, mbps * 1e6 / 8.0, latency_ms)
    }

    /// Built-in network classes: ethernet, wifi, 4g, 3g.
    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|&(n, mbps, lat)| Self::from_mbps(n, mbps, lat).expect("presets are valid"))
    }

    /// No delay at all; for tests and same-host runs.
    pub fn unlimited() -> Self {
        Self { name: "loopback".into(), bandwidth: f64::INFINITY, latency_ms: 0.0 }
    }

    pub fn delay_ms(&self, bytes: usize) -> f64 {
        self.latency_ms + bytes as f64 * 1000.0 / self.bandwidth
    }

    pub fn estimate(&self) -> LinkEstimate {
        LinkEstimate { latency_ms: self.latency_ms, bandwidth: self.bandwidth }
    }

    pub fn mbps(&self) -> f64 {
        self.bandwidth * 8.0 / 1e6
    }
}

/// Applies a link's delay to messages, with optional seeded jitter added
/// to the latency.
///
/// The uplink carries one message at a time on its own clock: a message
/// occupies it from when both are free, so a sender that wakes late does
/// not push back the messages queued behind it.
#[derive(Debug)]
pub struct LinkEmulator {
    model: LinkModel,
    jitter: Option<(f64, Mutex<ChaCha8Rng>)>,
    uplink_free: Mutex<Option<Instant>>,
}

impl LinkEmulator {
    pub fn new(model: LinkModel) -> Self {
        Self { model, jitter: None, uplink_free: Mutex::new(None) }
    }

    /// Adds uniform `[0, max_ms)` latency jitter drawn from `seed`.
    pub fn with_jitter(model: LinkModel, max_ms: f64, seed: u64) -> Self {
        Self {
            model,
            jitter: (max_ms > 0.0).then(|| (max_ms, Mutex::new(ChaCha8Rng::seed_from_u64(seed)))),
            uplink_free: Mutex::new(None),
        }
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    pub fn delay(&self, bytes: usize) -> Duration {
        let jitter = match &self.jitter {
            Some((max, rng)) => rng.lock().unwrap().random_range(0.0..*max),
            None => 0.0,
        };
        duration_ms(self.model.delay_ms(bytes) + jitter)
    }

    /// Blocks until a message of `bytes` sent now has crossed the uplink;
    /// returns its occupancy of the link.
    pub fn transmit(&self, bytes: usize) -> Duration {
        self.transmit_from(Instant::now(), bytes)
    }

    /// As `transmit` for a message that was ready to send at `ready`.
    pub fn transmit_from(&self, ready: Instant, bytes: usize) -> Duration {
        let d = self.delay(bytes);
        let done = {
            let mut free = self.uplink_free.lock().unwrap();
            let start = free.map_or(ready, |f| f.max(ready));
            *free = Some(start + d);
            start + d
        };
        sleep_until(done);
        d
    }
}

/// Extra time added to a compute stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ComputeEmulation {
    #[default]
    None,
    /// Stretch the measured time by this factor (>= 1).
    Slowdown(f64),
    /// Pad the stage to at least this many ms.
    FixedMs(f64),
}

impl ComputeEmulation {
    /// Sleeps until the stage started at `started` has taken its emulated
    /// time; returns the stage's total ms.
    pub fn pad(&self, started: Instant) -> f64 {
        let actual = started.elapsed();
        let target = match *self {
            ComputeEmulation::None => actual,
            ComputeEmulation::Slowdown(k) => actual.mul_f64(k.max(1.0)),
            ComputeEmulation::FixedMs(ms) => actual.max(duration_ms(ms)),
        };
        sleep_until(started + target);
        started.elapsed().as_secs_f64() * 1e3
    }
}

pub fn duration_ms(ms: f64) -> Duration {
    Duration::from_secs_f64((ms / 1e3).clamp(0.0, 1e9))
}

pub fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}
