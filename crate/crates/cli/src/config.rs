//! Link and sweep configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use onloadrt_core::profiler::LinkEstimate;
use onloadrt_core::runtime::LinkModel;
use serde::Deserialize;

/// Link file layout. `historical` seeds the scheduler's long-term estimate
/// for this network type and defaults to the emulated values.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    name: String,
    bandwidth_mbps: f64,
    latency_ms: f64,
    #[serde(default)]
    jitter_ms: f64,
    historical: Option<EstimateFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateFile {
    bandwidth_mbps: f64,
    latency_ms: f64,
}

#[derive(Debug, Clone)]
pub struct LinkConfig {
    pub link: LinkModel,
    /// Maximum extra latency per message; zero disables jitter.
    pub jitter_ms: f64,
    pub historical: LinkEstimate,
}

impl LinkConfig {
    fn plain(link: LinkModel) -> Self {
        let historical = link.estimate();
        Self { link, jitter_ms: 0.0, historical }
    }
}

/// `none` for no emulation, a preset name, or a link file.
pub fn resolve_link(spec: &str) -> Result<LinkConfig> {
    if spec == "none" {
        return Ok(LinkConfig::plain(LinkModel::unlimited()));
    }
    if let Some(link) = LinkModel::preset(spec) {
        return Ok(LinkConfig::plain(link));
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!("link `{spec}` is neither none, a preset (ethernet, wifi, 4g, 3g) nor an existing file");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading link file {}", path.display()))?;
    let file: LinkFile = toml::from_str(&text).with_context(|| format!("parsing link file {}", path.display()))?;
    let link = LinkModel::from_mbps(&file.name, file.bandwidth_mbps, file.latency_ms)
        .map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if !(file.jitter_ms >= 0.0) {
        bail!("{}: jitter_ms must be non-negative", path.display());
    }
    let historical = match file.historical {
        Some(h) => LinkModel::from_mbps(&file.name, h.bandwidth_mbps, h.latency_ms)
            .map_err(|e| anyhow!("{}: historical: {e}", path.display()))?
            .estimate(),
        None => link.estimate(),
    };
    Ok(LinkConfig { link, jitter_ms: file.jitter_ms, historical })
}

/// Sweep file layout; every field can be overridden on the command line.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub profile: Option<PathBuf>,
    pub axis: Option<String>,
    pub points: Option<Vec<f64>>,
    pub link: Option<String>,
    pub client_slowdown: Option<f64>,
    pub server_slowdown: Option<f64>,
    #[serde(default)]
    pub hard: Vec<String>,
    #[serde(default)]
    pub soft: Vec<String>,
    pub pipelined: Option<bool>,
    pub output: Option<PathBuf>,
}

pub fn read_sweep_file(path: &Path) -> Result<SweepFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading sweep config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing sweep config {}", path.display()))
}
