//! Discrete-event simulation of the backbone push, a pull mesh second tier,
//! churn, and the multi-OPST baseline.

mod backbone;
pub mod engine;
mod hybrid;
pub mod mesh;
mod metrics;
mod tier;

pub use backbone::{run_backbone_sim, run_baseline_multi_opst};
pub use engine::{transfer_time, EventKind, EventQueue, LinkDelays, SimEvent, Uplink, EVENT_QUANTUM, SERVER};
pub use hybrid::{run_hybrid_sim, SimError};
pub use mesh::{pull_mesh_step, MeshAction, MeshParams, MeshPeer, NeighborView};
pub use metrics::{percentile, ControlStats, DelaySample, MetricsReport, Percentiles, Summary, Tier, Via, LIFETIME_CAVEAT};
pub use tier::{attach_sub_overlay, SubOverlay, TierError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::overlay::LevelPolicy;

/// Pareto lifetimes, truncated at the end of the session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifetimeModel {
    pub alpha: f64,
    /// Target mean of the session-truncated lifetime, in seconds.
    pub mean: f64,
}

impl Default for LifetimeModel {
    fn default() -> Self {
        LifetimeModel {
            alpha: 1.0,
            mean: 100.0,
        }
    }
}

impl LifetimeModel {
    /// `E[min(X, horizon)]` for scale `xm`.
    pub fn truncated_mean(&self, xm: f64, horizon: f64) -> f64 {
        if horizon <= xm {
            return horizon;
        }
        let a = self.alpha;
        if (a - 1.0).abs() < 1e-12 {
            xm * (1.0 + (horizon / xm).ln())
        } else {
            a * xm / (a - 1.0) - xm.powf(a) * horizon.powf(1.0 - a) / (a - 1.0)
        }
    }

    /// Scale making the truncated mean equal `self.mean` (bisection; the
    /// truncated mean grows with the scale).
    pub fn scale(&self, horizon: f64) -> f64 {
        if self.mean >= horizon {
            return horizon;
        }
        let (mut lo, mut hi) = (1e-12f64, horizon);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.truncated_mean(mid, horizon) < self.mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Lifetime for a uniform draw `u` in (0, 1].
    pub fn sample(&self, xm: f64, u: f64) -> f64 {
        xm / u.powf(1.0 / self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier2Mode {
    PullMesh,
    /// Rate factor of the reduced-quality sub-stream.
    SubSnap(f64),
    SubOpst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Snap,
    MultiOpst,
    PullOnly,
}

fn default_bw_range() -> [f64; 2] {
    [0.5, 3.0]
}
fn default_server_upload() -> f64 {
    4.0
}
fn default_server_mesh_degree() -> usize {
    4
}
fn default_control_bytes() -> u64 {
    100
}
fn default_group() -> usize {
    8
}
fn default_packets() -> usize {
    10
}
fn default_drain() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Bits per chunk.
    pub chunk_size: f64,
    /// Bits per second.
    pub stream_rate: f64,
    pub link_delay_range: [f64; 2],
    pub session_length: f64,
    pub initial_peers: usize,
    pub arrival_rate: f64,
    pub max_peers: usize,
    pub p1: f64,
    pub p2: f64,
    #[serde(default)]
    pub lifetime_model: LifetimeModel,
    pub tier2_mode: Tier2Mode,
    pub baseline: Baseline,
    /// Upload capacity range, in multiples of the stream rate.
    #[serde(default = "default_bw_range")]
    pub upload_bw_range: [f64; 2],
    /// Server upload, in multiples of the stream rate.
    #[serde(default = "default_server_upload")]
    pub server_upload: f64,
    #[serde(default = "default_server_mesh_degree")]
    pub server_mesh_degree: usize,
    #[serde(default)]
    pub mesh: MeshParams,
    #[serde(default)]
    pub level_policy: LevelPolicy,
    /// Size of a gossip, alert, request or table-update message.
    #[serde(default = "default_control_bytes")]
    pub control_msg_bytes: u64,
    #[serde(default = "default_group")]
    pub sub_group_size: usize,
    #[serde(default = "default_packets")]
    pub packets_per_chunk: usize,
    /// Extra simulated time after the last emission so late chunks can land.
    #[serde(default = "default_drain")]
    pub drain: f64,
    /// Keep a textual event log (large).
    #[serde(default)]
    pub log_events: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn bad(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        message: message.into(),
    }
}

impl ScenarioConfig {
    /// Chunk period, also the transmission time of a chunk at the baseline rate.
    pub fn chunk_period(&self) -> f64 {
        self.chunk_size / self.stream_rate
    }

    pub fn num_chunks(&self) -> u64 {
        (self.session_length / self.chunk_period()).floor().max(0.0) as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.chunk_size) {
            return Err(bad("chunk_size", "must be > 0"));
        }
        if !pos(self.stream_rate) {
            return Err(bad("stream_rate", "must be > 0"));
        }
        let [lo, hi] = self.link_delay_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(bad("link_delay_range", "need 0 <= min <= max"));
        }
        if !(self.session_length >= 0.0 && self.session_length.is_finite()) {
            return Err(bad("session_length", "must be >= 0"));
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(bad("arrival_rate", "must be >= 0"));
        }
        if self.max_peers < self.initial_peers {
            return Err(bad("max_peers", "must be >= initial_peers"));
        }
        for (f, v) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(f, "must lie in [0, 1]"));
            }
        }
        if !(pos(self.lifetime_model.alpha) && pos(self.lifetime_model.mean)) {
            return Err(bad("lifetime_model", "alpha and mean must be > 0"));
        }
        if let Tier2Mode::SubSnap(f) = self.tier2_mode {
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad("tier2_mode", "sub_snap rate factor must lie in (0, 1]"));
            }
        }
        let [blo, bhi] = self.upload_bw_range;
        if !(blo >= 0.0 && bhi >= blo && bhi.is_finite()) {
            return Err(bad("upload_bw_range", "need 0 <= min <= max"));
        }
        if !(self.server_upload >= 1.0) {
            return Err(bad("server_upload", "server must sustain at least the stream rate"));
        }
        if self.sub_group_size == 0 {
            return Err(bad("sub_group_size", "must be >= 1"));
        }
        if self.packets_per_chunk == 0 {
            return Err(bad("packets_per_chunk", "must be >= 1"));
        }
        if !(self.drain >= 0.0) {
            return Err(bad("drain", "must be >= 0"));
        }
        self.mesh.validate()
    }

    /// Churn-free, arrival-free calibration scenario with uniform link delay `d`.
    pub fn calibration(n: usize, d: f64, t: f64, chunks: u64) -> Self {
        ScenarioConfig {
            seed: 1,
            chunk_size: t,
            stream_rate: 1.0,
            link_delay_range: [d, d],
            session_length: chunks as f64 * t,
            initial_peers: n,
            arrival_rate: 0.0,
            max_peers: n,
            p1: 1.0,
            p2: 0.0,
            lifetime_model: LifetimeModel::default(),
            tier2_mode: Tier2Mode::PullMesh,
            baseline: Baseline::Snap,
            upload_bw_range: [1.0, 1.0],
            server_upload: default_server_upload(),
            server_mesh_degree: default_server_mesh_degree(),
            mesh: MeshParams::default(),
            level_policy: LevelPolicy::Auto,
            control_msg_bytes: default_control_bytes(),
            sub_group_size: default_group(),
            packets_per_chunk: default_packets(),
            drain: default_drain(),
            log_events: false,
        }
    }

    /// Desk-scale hybrid session: 300 Kb chunks at 300 Kbps, 50-500 ms links,
    /// 20 initial peers growing to 100.
    pub fn hybrid_default(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            chunk_size: 300_000.0,
            stream_rate: 300_000.0,
            link_delay_range: [0.05, 0.5],
            session_length: 300.0,
            initial_peers: 20,
            arrival_rate: 1.0,
            max_peers: 100,
            p1: 0.3,
            p2: 0.1,
            upload_bw_range: default_bw_range(),
            ..ScenarioConfig::calibration(20, 0.0, 1.0, 0)
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = serde_json::from_str(s).map_err(|e| bad("json", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
