use std::collections::BTreeMap;

use crate::overlay::{MultiSbtOverlay, PeerId};
use crate::schedule::derive_neighbor_tables;

use super::engine::{EventKind, EventQueue, LinkDelays, Uplink};
use super::hybrid::SimError;
use super::metrics::{DelaySample, MetricsReport, Tier, Via};
use super::ScenarioConfig;

#[derive(Debug, Clone, Copy)]
struct Delivery {
    chunk: u64,
    to: PeerId,
}

/// Churn-free push over a validated overlay.
///
/// The server hands chunk `c` to the root of tree `c mod P` at `c` chunk
/// periods; that hand-off is the emission instant. Every peer forwards along
/// its neighbor table at the baseline rate, so one chunk occupies its uplink
/// for exactly one chunk period.
pub fn run_backbone_sim(overlay: &MultiSbtOverlay, config: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    config.validate()?;
    let tables = derive_neighbor_tables(overlay)?;
    let trees = overlay.trees();
    let p = trees.len() as u64;
    let period = config.chunk_period();
    let tx = period;
    let bytes = (config.chunk_size / 8.0).round() as u64;
    let num = config.num_chunks();
    let mut links = LinkDelays::new(config.seed, config.link_delay_range);
    let mut uplinks: BTreeMap<PeerId, Uplink> = BTreeMap::new();
    let mut got: BTreeMap<(u64, PeerId), f64> = BTreeMap::new();
    let mut report = MetricsReport::default();
    for peer in overlay.peer_order() {
        report.tiers.insert(peer, Tier::Backbone);
    }
    let mut q: EventQueue<Delivery> = EventQueue::default();
    for c in 0..num {
        let root = trees[(c % p) as usize].root();
        q.push(c as f64 * period, EventKind::ChunkEmit, Delivery { chunk: c, to: root });
    }
    while let Some(ev) = q.pop() {
        let Delivery { chunk, to } = ev.payload;
        if got.insert((chunk, to), ev.time).is_some() {
            return Err(SimError::Starvation(format!("peer {to} received chunk {chunk} twice")));
        }
        let emit = chunk as f64 * period;
        let via = if ev.kind == EventKind::ChunkEmit { Via::Source } else { Via::Push };
        report.playback_delay.push(DelaySample {
            chunk,
            peer: to,
            delay: ev.time - emit,
            via,
        });
        if report.startup_latency.get(&to).is_none() {
            report.startup_latency.insert(to, ev.time);
        }
        let tree = (chunk % p) as usize;
        let Some(kids) = tables.get(&to).and_then(|t| t.subset_for(tree)) else {
            continue;
        };
        let up = uplinks.entry(to).or_default();
        for &child in kids {
            let d = links.get(to, child);
            let (_, arrive) = up.send(ev.time, tx, d);
            report.data_bytes += bytes;
            if config.log_events {
                report.events.push(format!("{:.9} push {} {} -> {}", ev.time, chunk, to, child));
            }
            q.push(arrive, EventKind::TransferComplete, Delivery { chunk, to: child });
        }
    }
    let expected = num * overlay.n() as u64;
    report.lost = expected.saturating_sub(got.len() as u64);
    Ok(report)
}

/// `N` single-relay trees: peer `i` roots tree `i` and forwards chunk
/// `c = i (mod N)` to every other peer in turn. The server's upload to the root
/// costs one transmission time and no propagation.
pub fn run_baseline_multi_opst(config: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    config.validate()?;
    let n = config.initial_peers as u32;
    let period = config.chunk_period();
    let tx = period;
    let bytes = (config.chunk_size / 8.0).round() as u64;
    let mut links = LinkDelays::new(config.seed, config.link_delay_range);
    let mut report = MetricsReport::default();
    if n == 0 {
        return Ok(report);
    }
    for i in 0..n {
        report.tiers.insert(PeerId(i), Tier::Backbone);
    }
    let mut server = Uplink::default();
    let mut uplinks = vec![Uplink::default(); n as usize];
    for c in 0..config.num_chunks() {
        let emit = c as f64 * period;
        let root = (c % n as u64) as u32;
        let (_, at_root) = server.send(emit, tx, 0.0);
        report.data_bytes += bytes;
        let mut arrivals = vec![(PeerId(root), at_root, Via::Source)];
        for j in 1..n {
            let dest = PeerId((root + j) % n);
            let d = links.get(PeerId(root), dest);
            let (_, at) = uplinks[root as usize].send(at_root, tx, d);
            report.data_bytes += bytes;
            arrivals.push((dest, at, Via::Push));
        }
        for (peer, at, via) in arrivals {
            report.startup_latency.entry(peer).or_insert(at);
            report.playback_delay.push(DelaySample {
                chunk: c,
                peer,
                delay: at - emit,
                via,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{sbt_avg_exact_pow2, DelayModel};
    use crate::overlay::{build_overlay, peers, LevelPolicy};

    #[test]
    fn sixteen_peer_calibration() {
        let o = build_overlay(&peers(0..16), &LevelPolicy::Auto).unwrap();
        let cfg = ScenarioConfig::calibration(16, 1.0, 1.0, 32);
        let r = run_backbone_sim(&o, &cfg).unwrap();
        assert_eq!(r.lost, 0);
        assert!((r.max_delay() - 8.0).abs() < 1e-9);
        let exact = sbt_avg_exact_pow2(4, DelayModel::new(1.0, 1.0).unwrap());
        assert!((r.mean_delay() - exact).abs() < 1e-9, "{}", r.mean_delay());
    }

    #[test]
    fn two_peers() {
        let o = build_overlay(&peers(0..2), &LevelPolicy::Auto).unwrap();
        let r = run_backbone_sim(&o, &ScenarioConfig::calibration(2, 0.3, 1.0, 5)).unwrap();
        assert!(r.playback_delay.iter().filter(|s| s.via == Via::Push).all(|s| (s.delay - 1.3).abs() < 1e-9));
    }

    #[test]
    fn opst_baseline() {
        let r = run_baseline_multi_opst(&ScenarioConfig::calibration(16, 1.0, 1.0, 32)).unwrap();
        assert!((r.max_delay() - 17.0).abs() < 1e-9);
        let one = run_baseline_multi_opst(&ScenarioConfig::calibration(1, 1.0, 1.0, 4)).unwrap();
        assert!(one.playback_delay.iter().all(|s| s.via == Via::Source));
        let fast = run_baseline_multi_opst(&ScenarioConfig::calibration(16, 1.0, 0.01, 64)).unwrap();
        let o = build_overlay(&peers(0..16), &LevelPolicy::Auto).unwrap();
        let snap = run_backbone_sim(&o, &ScenarioConfig::calibration(16, 1.0, 0.01, 64)).unwrap();
        assert!(fast.max_delay() < snap.max_delay());
    }
}
