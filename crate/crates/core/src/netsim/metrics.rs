use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::overlay::PeerId;

use super::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Backbone,
    SecondTier,
}

/// How a chunk reached a peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    /// Straight from the server (tree roots).
    Source,
    Push,
    Pull,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub chunk: u64,
    pub peer: PeerId,
    pub delay: f64,
    pub via: Via,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlStats {
    pub counts: BTreeMap<String, u64>,
    pub bytes: BTreeMap<String, u64>,
}

impl ControlStats {
    pub fn add(&mut self, category: &str, count: u64, bytes: u64) {
        *self.counts.entry(category.to_string()).or_default() += count;
        *self.bytes.entry(category.to_string()).or_default() += bytes;
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.values().sum()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub startup_latency: BTreeMap<PeerId, f64>,
    pub playback_delay: Vec<DelaySample>,
    pub tiers: BTreeMap<PeerId, Tier>,
    pub control: ControlStats,
    pub data_bytes: u64,
    /// Chunks a peer was due but never received.
    pub lost: u64,
    /// Backbone chunks the push path missed during reshaping that the pull path recovered.
    pub repair_recovered: u64,
    pub priority_violations: u64,
    pub bandwidth_violations: u64,
    /// Pareto scale used for lifetimes, when churn was simulated.
    pub lifetime_scale: Option<f64>,
    #[serde(skip)]
    pub events: Vec<String>,
}

impl MetricsReport {
    /// Control bytes over all bytes sent.
    pub fn overhead(&self) -> f64 {
        let c = self.control.total_bytes() as f64;
        let total = c + self.data_bytes as f64;
        if total == 0.0 {
            0.0
        } else {
            c / total
        }
    }

    pub fn delays(&self) -> Vec<f64> {
        self.playback_delay.iter().map(|s| s.delay).collect()
    }

    pub fn delays_of(&self, tier: Tier) -> Vec<f64> {
        self.playback_delay
            .iter()
            .filter(|s| self.tiers.get(&s.peer) == Some(&tier))
            .map(|s| s.delay)
            .collect()
    }

    pub fn max_delay(&self) -> f64 {
        self.delays().into_iter().fold(0.0, f64::max)
    }

    pub fn mean_delay(&self) -> f64 {
        let d = self.delays();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    /// Long-format rows: `peer_id,chunk_id,metric,value`.
    pub fn write_csv<W: io::Write>(&self, header: Option<&str>, mut w: W) -> csv::Result<()> {
        if let Some(h) = header {
            writeln!(w, "# {h}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["peer_id", "chunk_id", "metric", "value"])?;
        let num = |v: f64| format!("{v}");
        for (p, v) in &self.startup_latency {
            out.write_record([p.0.to_string(), String::new(), "startup_latency".into(), num(*v)])?;
        }
        let mut samples = self.playback_delay.clone();
        samples.sort_by(|a, b| (a.peer, a.chunk).cmp(&(b.peer, b.chunk)));
        for s in &samples {
            out.write_record([
                s.peer.0.to_string(),
                s.chunk.to_string(),
                "playback_delay".into(),
                num(s.delay),
            ])?;
        }
        for (cat, n) in &self.control.counts {
            out.write_record([String::new(), String::new(), format!("control_count.{cat}"), n.to_string()])?;
        }
        for (cat, n) in &self.control.bytes {
            out.write_record([String::new(), String::new(), format!("control_bytes.{cat}"), n.to_string()])?;
        }
        let totals = [
            ("data_bytes", self.data_bytes.to_string()),
            ("control_overhead", num(self.overhead())),
            ("lost", self.lost.to_string()),
            ("repair_recovered", self.repair_recovered.to_string()),
        ];
        for (m, v) in totals {
            out.write_record([String::new(), String::new(), m.to_string(), v])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self, config: &ScenarioConfig) -> Summary {
        let backbone = self.tiers.values().filter(|&&t| t == Tier::Backbone).count();
        Summary {
            playback_delay: Percentiles::of(self.delays()),
            playback_delay_backbone: Percentiles::of(self.delays_of(Tier::Backbone)),
            playback_delay_second_tier: Percentiles::of(self.delays_of(Tier::SecondTier)),
            startup_latency: Percentiles::of(self.startup_latency.values().copied().collect()),
            control_overhead: self.overhead(),
            control_bytes: self.control.total_bytes(),
            control_messages: self.control.total_count(),
            data_bytes: self.data_bytes,
            lost: self.lost,
            repair_recovered: self.repair_recovered,
            backbone_peers: backbone,
            second_tier_peers: self.tiers.len() - backbone,
            priority_violations: self.priority_violations,
            lifetime_scale: self.lifetime_scale,
            lifetime_caveat: LIFETIME_CAVEAT.to_string(),
            config: config.clone(),
            manifest: None,
        }
    }
}

pub const LIFETIME_CAVEAT: &str = "Pareto lifetimes with alpha = 1 have no finite mean; the scale is chosen so \
the lifetime truncated at the session end has the configured mean.";

/// Linear-interpolation percentile of `sorted` (ascending), `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl Percentiles {
    pub fn of(mut v: Vec<f64>) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Percentiles {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: *v.last().unwrap(),
            p10: percentile(&v, 10.0),
            p50: percentile(&v, 50.0),
            p90: percentile(&v, 90.0),
            p99: percentile(&v, 99.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub playback_delay: Option<Percentiles>,
    pub playback_delay_backbone: Option<Percentiles>,
    pub playback_delay_second_tier: Option<Percentiles>,
    pub startup_latency: Option<Percentiles>,
    pub control_overhead: f64,
    pub control_bytes: u64,
    pub control_messages: u64,
    pub data_bytes: u64,
    pub lost: u64,
    pub repair_recovered: u64,
    pub backbone_peers: usize,
    pub second_tier_peers: usize,
    pub priority_violations: u64,
    pub lifetime_scale: Option<f64>,
    pub lifetime_caveat: String,
    pub config: ScenarioConfig,
    /// Filled in by the command that wrote the file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert!((percentile(&v, 10.0) - 1.4).abs() < 1e-12);
        assert!(Percentiles::of(Vec::new()).is_none());
    }

    #[test]
    fn overhead_ratio() {
        let mut m = MetricsReport::default();
        assert_eq!(m.overhead(), 0.0);
        m.control.add("gossip", 1, 100);
        m.data_bytes = 300;
        assert_eq!(m.overhead(), 0.25);
    }
}
