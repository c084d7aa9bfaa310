//! Full session: arrivals, admission, backbone push, pull mesh, sub tiers, churn.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::membership::{
    admit, handle_departure_with, join_backbone_batch, starvation_alerts, Admission, MembershipError,
    PeerProfile,
};
use crate::overlay::{build_overlay, MultiSbtOverlay, OverlayError, PeerId};
use crate::schedule::{derive_neighbor_tables, NeighborTable, ScheduleError};

use super::engine::{EventKind, EventQueue, LinkDelays, Uplink, EVENT_QUANTUM, SERVER};
use super::mesh::{pull_mesh_step, MeshAction, MeshPeer, NeighborView};
use super::metrics::{DelaySample, MetricsReport, Tier, Via};
use super::tier::{attach_sub_overlay, SubOverlay};
use super::{Baseline, ConfigError, ScenarioConfig, Tier2Mode};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Membership(#[from] MembershipError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("starvation: {0}")]
    Starvation(String),
}

/// How the backbone delivers chunks emitted while this version is current.
#[derive(Debug, Clone)]
enum Push {
    None,
    Solo(PeerId),
    Snap {
        depth: usize,
        roots: Vec<PeerId>,
        tables: BTreeMap<PeerId, NeighborTable>,
    },
    Opst(Vec<PeerId>),
}

impl Push {
    fn snap(o: &MultiSbtOverlay) -> Result<Push, SimError> {
        Ok(Push::Snap {
            depth: o.depth(),
            roots: o.trees().iter().map(|t| t.root()).collect(),
            tables: derive_neighbor_tables(o)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Arrive(PeerId),
    Depart(PeerId),
    Emit(u64),
    Deliver {
        chunk: u64,
        to: PeerId,
        from: PeerId,
        via: Via,
        /// End of the sender's transmission; a sender gone by then never finished.
        sent: f64,
    },
    Request {
        chunk: u64,
        from: PeerId,
        to: PeerId,
    },
    /// A holder's "busy" answer to a request.
    Reject {
        chunk: u64,
        to: PeerId,
        by: PeerId,
    },
    Serve(PeerId),
    Tick(PeerId),
    ServerTick,
    JoinBatch,
}

#[derive(Debug, Default)]
struct PullServer {
    queue: VecDeque<(PeerId, u64)>,
    busy_until: f64,
    scheduled: bool,
}

#[derive(Debug)]
struct PeerState {
    profile: PeerProfile,
    admission: Admission,
    depart: f64,
    alive: bool,
    accepted: bool,
    in_backbone: bool,
    /// Bits per second available for pull responses.
    pull_rate: f64,
    push: Uplink,
    /// `[ready, start)` of pushes that had to wait, in send order.
    push_waits: Vec<(f64, f64)>,
    pull_starts: Vec<f64>,
    server: PullServer,
    neighbors: BTreeSet<PeerId>,
    mesh: MeshPeer,
    advert: BTreeSet<u64>,
    /// Pull bandwidth per queued request, as of the last buffer map.
    advert_capacity: f64,
    sub_parent: Option<PeerId>,
    phase: f64,
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    tau: f64,
    end: f64,
    num: u64,
    q: EventQueue<Ev>,
    links: LinkDelays,
    mesh_rng: ChaCha8Rng,
    peers: Vec<PeerState>,
    alive: BTreeSet<PeerId>,
    server: PullServer,
    server_rate: f64,
    server_push: Uplink,
    server_neighbors: BTreeSet<PeerId>,
    server_advert: BTreeSet<u64>,
    next_server_gossip: f64,
    newest: Option<u64>,
    versions: Vec<Push>,
    chunk_version: Vec<usize>,
    overlay: Option<MultiSbtOverlay>,
    members: Vec<PeerId>,
    pending: Vec<PeerId>,
    join_scheduled: bool,
    groups: BTreeMap<PeerId, SubOverlay>,
    report: MetricsReport,
}

/// Runs one complete session and returns its metrics.
///
/// Every random choice comes from a stream derived from `config.seed`, and
/// all bookkeeping uses ordered maps, so equal configs give equal reports.
pub fn run_hybrid_sim(config: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    config.validate()?;
    let mut sim = Sim::new(config);
    sim.populate();
    sim.start()?;
    sim.run()?;
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        let tau = cfg.chunk_period();
        let reserve = if cfg.baseline == Baseline::PullOnly { 0.0 } else { 1.0 };
        Sim {
            cfg,
            tau,
            end: cfg.session_length + cfg.drain,
            num: cfg.num_chunks(),
            q: EventQueue::default(),
            links: LinkDelays::new(cfg.seed, cfg.link_delay_range),
            mesh_rng: stream(cfg.seed, 3),
            peers: Vec::new(),
            alive: BTreeSet::new(),
            server: PullServer::default(),
            server_rate: (cfg.server_upload - reserve) * cfg.stream_rate,
            server_push: Uplink::default(),
            server_neighbors: BTreeSet::new(),
            server_advert: BTreeSet::new(),
            next_server_gossip: 0.0,
            newest: None,
            versions: vec![Push::None],
            chunk_version: Vec::new(),
            overlay: None,
            members: Vec::new(),
            pending: Vec::new(),
            join_scheduled: false,
            groups: BTreeMap::new(),
            report: MetricsReport::default(),
        }
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if self.cfg.log_events {
            let t = self.q.now();
            self.report.events.push(format!("{t:.9} {}", line()));
        }
    }

    fn control(&mut self, category: &str, count: u64) {
        let bytes = if category == "buffer_map" {
            count * self.cfg.mesh.buffermap_bytes()
        } else {
            count * self.cfg.control_msg_bytes
        };
        self.report.control.add(category, count, bytes);
    }

    fn chunk_bytes(&self) -> u64 {
        (self.cfg.chunk_size / 8.0).round() as u64
    }

    /// Draws every peer up front; per-peer attributes come from a per-peer
    /// stream so that changing `p1` or `p2` only flips the affected coins.
    fn populate(&mut self) {
        let cfg = self.cfg;
        let mut times: Vec<f64> = vec![0.0; cfg.initial_peers];
        if cfg.arrival_rate > 0.0 {
            let gap = Exp::new(cfg.arrival_rate).expect("positive rate");
            let mut rng = stream(cfg.seed, 1);
            let mut t = 0.0;
            loop {
                t += gap.sample(&mut rng);
                if t >= cfg.session_length {
                    break;
                }
                times.push(t);
            }
        }
        let horizon = cfg.session_length;
        let xm = cfg.lifetime_model.scale(horizon);
        let churn = cfg.p2 > 0.0 || cfg.p1 < 1.0;
        if churn {
            self.report.lifetime_scale = Some(xm);
        }
        let [blo, bhi] = cfg.upload_bw_range;
        for (i, &join) in times.iter().enumerate() {
            let mut rng = stream(cfg.seed, 1000 + i as u64);
            let bw = if bhi > blo { rng.random_range(blo..=bhi) } else { blo } * cfg.stream_rate;
            let labeled = rng.random::<f64>() < cfg.p1;
            let false_label = rng.random::<f64>() < cfg.p2;
            let u: f64 = 1.0 - rng.random::<f64>();
            let phase = rng.random::<f64>() * cfg.mesh.buffermap_period;
            let truly_stable = labeled && !false_label;
            let depart = if truly_stable {
                f64::INFINITY
            } else {
                join + cfg.lifetime_model.sample(xm, u)
            };
            let id = PeerId(i as u32);
            let profile = PeerProfile {
                id,
                upload_bw: bw,
                labeled_stable: labeled,
                truly_stable,
                join_time: join,
            };
            let admission = if cfg.baseline == Baseline::PullOnly {
                Admission::SecondTier { surplus: bw }
            } else {
                admit(&profile, cfg.stream_rate)
            };
            let playback = (join / self.tau - 1e-9).ceil().max(0.0) as u64;
            self.peers.push(PeerState {
                profile,
                admission,
                depart,
                alive: false,
                accepted: false,
                in_backbone: false,
                pull_rate: admission.surplus(),
                push: Uplink::default(),
                push_waits: Vec::new(),
                pull_starts: Vec::new(),
                server: PullServer::default(),
                neighbors: BTreeSet::new(),
                mesh: MeshPeer::new(id, playback, join + phase),
                advert: BTreeSet::new(),
                advert_capacity: 0.0,
                sub_parent: None,
                phase,
            });
        }
    }

    fn start(&mut self) -> Result<(), SimError> {
        let initial: Vec<PeerId> = (0..self.cfg.initial_peers as u32).map(PeerId).collect();
        for &p in &initial {
            self.accept(p);
        }
        let backbone: Vec<PeerId> = initial.iter().copied().filter(|p| self.peers[p.0 as usize].admission.is_backbone()).collect();
        if self.cfg.baseline != Baseline::PullOnly {
            // initial construction: one table message per member
            self.control("table_update", backbone.len() as u64);
            self.rebuild_from_scratch(backbone)?;
        }
        for p in initial {
            self.after_accept(p);
        }
        for i in self.cfg.initial_peers..self.peers.len() {
            let t = self.peers[i].profile.join_time;
            self.q.push(t, EventKind::Arrival, Ev::Arrive(PeerId(i as u32)));
        }
        for c in 0..self.num {
            self.q.push(c as f64 * self.tau, EventKind::ChunkEmit, Ev::Emit(c));
        }
        self.refill_server();
        self.q.push(0.0, EventKind::BuffermapExchange, Ev::ServerTick);
        Ok(())
    }

    fn accept(&mut self, p: PeerId) {
        let st = &mut self.peers[p.0 as usize];
        st.alive = true;
        st.accepted = true;
        self.alive.insert(p);
        let tier = if st.admission.is_backbone() { Tier::Backbone } else { Tier::SecondTier };
        self.report.tiers.insert(p, tier);
    }

    /// Mesh wiring, timers and sub-tier attachment for a newly accepted peer.
    fn after_accept(&mut self, p: PeerId) {
        self.refill(p);
        let st = &self.peers[p.0 as usize];
        let (tick, depart) = (st.profile.join_time + st.phase, st.depart);
        self.q.push(tick, EventKind::BuffermapExchange, Ev::Tick(p));
        if depart < self.cfg.session_length {
            self.q.push(depart, EventKind::Departure, Ev::Depart(p));
        }
        if !self.peers[p.0 as usize].admission.is_backbone() && self.cfg.tier2_mode != Tier2Mode::PullMesh {
            self.try_attach(p);
        }
    }

    fn rebuild_from_scratch(&mut self, members: Vec<PeerId>) -> Result<(), SimError> {
        for &m in &members {
            self.peers[m.0 as usize].in_backbone = true;
        }
        let push = match (self.cfg.baseline, members.len()) {
            (_, 0) => Push::None,
            (Baseline::MultiOpst, _) => Push::Opst(members.clone()),
            (_, 1) => Push::Solo(members[0]),
            _ => {
                let o = build_overlay(&members, &self.cfg.level_policy)?;
                let push = Push::snap(&o)?;
                self.overlay = Some(o);
                push
            }
        };
        if members.len() < 2 {
            self.overlay = None;
        }
        self.members = members;
        self.versions.push(push);
        Ok(())
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.q.pop() {
            if ev.time > self.end {
                break;
            }
            match ev.payload {
                Ev::Arrive(p) => {
                    if self.alive.len() < self.cfg.max_peers {
                        self.accept(p);
                        self.log(|| format!("arrive {p}"));
                        if self.peers[p.0 as usize].admission.is_backbone() {
                            self.queue_join(p);
                        }
                        self.after_accept(p);
                    }
                }
                Ev::Depart(p) => self.depart(p)?,
                Ev::Emit(c) => self.emit(c),
                Ev::Deliver { chunk, to, from, via, sent } => {
                    if from != SERVER && self.peers[from.0 as usize].depart < sent - EVENT_QUANTUM {
                        continue;
                    }
                    self.receive(to, chunk, via, ev.time);
                    if via == Via::Pull && self.peers[to.0 as usize].alive {
                        self.step(to);
                    }
                }
                Ev::Request { chunk, from, to } => self.request_arrives(chunk, from, to),
                Ev::Reject { chunk, to, by } => {
                    let st = &mut self.peers[to.0 as usize];
                    if st.alive {
                        st.mesh.rejected(chunk, by);
                    }
                }
                Ev::Serve(p) => self.serve(p),
                Ev::Tick(p) => self.tick(p),
                Ev::ServerTick => self.server_tick(),
                Ev::JoinBatch => self.join_batch()?,
            }
        }
        Ok(())
    }

    fn tree_of(&self, chunk: u64, push: &Push) -> usize {
        match push {
            Push::Snap { roots, .. } => (chunk % roots.len() as u64) as usize,
            _ => 0,
        }
    }

    fn emit(&mut self, c: u64) {
        let now = self.q.now();
        self.newest = Some(c);
        self.server_advert.insert(c);
        let lo = (c + 1).saturating_sub(self.cfg.mesh.window);
        self.server_advert = self.server_advert.split_off(&lo);
        let v = self.versions.len() - 1;
        self.chunk_version.push(v);
        let bytes = self.chunk_bytes();
        match &self.versions[v] {
            Push::None => {}
            Push::Solo(p) => {
                let p = *p;
                self.report.data_bytes += bytes;
                self.receive(p, c, Via::Source, now);
            }
            Push::Snap { roots, .. } => {
                let root = roots[self.tree_of(c, &self.versions[v])];
                self.report.data_bytes += bytes;
                self.receive(root, c, Via::Source, now);
            }
            Push::Opst(list) => {
                let root = list[(c % list.len() as u64) as usize];
                let (_, at) = self.server_push.send(now, self.tau, 0.0);
                self.report.data_bytes += bytes;
                self.q.push(
                    at,
                    EventKind::TransferComplete,
                    Ev::Deliver { chunk: c, to: root, from: SERVER, via: Via::Source, sent: at },
                );
            }
        }
    }

    /// Children of `p` for `chunk` along the version the chunk was bound to.
    fn push_children(&self, p: PeerId, chunk: u64) -> Vec<PeerId> {
        let v = self.chunk_version[chunk as usize];
        match &self.versions[v] {
            Push::Snap { tables, roots, .. } => {
                let tree = (chunk % roots.len() as u64) as usize;
                tables
                    .get(&p)
                    .and_then(|t| t.subset_for(tree))
                    .map(|s| s.to_vec())
                    .unwrap_or_default()
            }
            Push::Opst(list) => {
                let n = list.len();
                let r = (chunk % n as u64) as usize;
                if list[r] != p {
                    return Vec::new();
                }
                (1..n).map(|j| list[(r + j) % n]).collect()
            }
            _ => Vec::new(),
        }
    }

    fn in_version(&self, p: PeerId, chunk: u64) -> bool {
        match &self.versions[self.chunk_version[chunk as usize]] {
            Push::None => false,
            Push::Solo(s) => *s == p,
            Push::Snap { tables, .. } => tables.contains_key(&p),
            Push::Opst(list) => list.contains(&p),
        }
    }

    fn receive(&mut self, p: PeerId, chunk: u64, via: Via, now: f64) {
        let i = p.0 as usize;
        if !self.peers[i].alive {
            return;
        }
        if !self.peers[i].mesh.receive(chunk) {
            return;
        }
        let emit = chunk as f64 * self.tau;
        let st = &self.peers[i];
        if chunk >= st.mesh.playback_point {
            if !self.report.startup_latency.contains_key(&p) {
                self.report.startup_latency.insert(p, now - st.profile.join_time);
            }
            self.report.playback_delay.push(DelaySample { chunk, peer: p, delay: now - emit, via });
        }
        if via == Via::Pull && st.in_backbone && self.in_version(p, chunk) {
            self.report.repair_recovered += 1;
        }
        self.log(|| format!("recv {chunk} at {p} via {via:?}"));
        if matches!(via, Via::Source | Via::Push) {
            let kids = self.push_children(p, chunk);
            let bytes = self.chunk_bytes();
            for child in kids {
                if !self.peers[child.0 as usize].alive {
                    continue;
                }
                let d = self.links.get(p, child);
                let st = &mut self.peers[i];
                let (start, arrive) = st.push.send(now, self.tau, d);
                if start > now + EVENT_QUANTUM {
                    st.push_waits.push((now, start));
                }
                self.report.data_bytes += bytes;
                let sent = start + self.tau;
                self.q.push(
                    arrive,
                    EventKind::TransferComplete,
                    Ev::Deliver { chunk, to: child, from: p, via: Via::Push, sent },
                );
            }
        }
        if let Some(g) = self.groups.get(&p) {
            let offs = g.offsets(chunk, &mut self.links);
            for (m, off) in offs {
                self.report.data_bytes += self.chunk_bytes();
                let at = now + off;
                self.q.push(
                    at,
                    EventKind::TransferComplete,
                    Ev::Deliver { chunk, to: m, from: p, via: Via::Sub, sent: at },
                );
            }
        }
    }

    fn in_hold_back(&self, p: PeerId) -> Option<f64> {
        let st = &self.peers[p.0 as usize];
        let dmax = self.cfg.link_delay_range[1];
        let base = match self.versions.last().expect("version") {
            Push::Snap { depth, .. } => (*depth + 2) as f64 * (dmax + self.tau),
            Push::Opst(list) => dmax + (list.len() + 2) as f64 * self.tau,
            Push::Solo(_) => dmax + 2.0 * self.tau,
            Push::None => return None,
        };
        if st.in_backbone {
            return Some(base);
        }
        let parent = st.sub_parent?;
        let g = self.groups.get(&parent)?;
        Some(base + g.bound(dmax) + self.tau)
    }

    fn tick(&mut self, p: PeerId) {
        let i = p.0 as usize;
        if !self.peers[i].alive {
            return;
        }
        let now = self.q.now();
        let newest = self.newest;
        let window = self.cfg.mesh.window;
        if let Some(n) = newest {
            let adv = self.peers[i].mesh.advertisement(n, window);
            self.peers[i].advert = adv;
        }
        {
            let st = &mut self.peers[i];
            let busy = (st.server.busy_until > now) as usize + st.server.queue.len();
            st.advert_capacity = st.pull_rate / (1 + busy) as f64;
        }
        if now >= self.peers[i].mesh.next_gossip {
            self.refill(p);
        }
        self.step(p);
        let next = now + self.cfg.mesh.buffermap_period;
        if next <= self.end {
            self.q.push(next, EventKind::BuffermapExchange, Ev::Tick(p));
        }
    }

    fn step(&mut self, p: PeerId) {
        let i = p.0 as usize;
        let now = self.q.now();
        let newest = match (self.newest, self.in_hold_back(p)) {
            (Some(n), Some(grace)) => {
                let lim = ((now - grace) / self.tau).floor();
                if lim < 0.0 {
                    None
                } else {
                    self.peers[i].mesh.eligible_upto = Some(lim as u64);
                    Some(n)
                }
            }
            (n, None) => {
                self.peers[i].mesh.eligible_upto = None;
                n
            }
            (None, _) => None,
        };
        let nb: Vec<PeerId> = self.peers[i].neighbors.iter().copied().collect();
        // Push-fed peers get no buffer maps; they assume fellow backbone
        // peers hold everything the push path should have delivered by now.
        let fed = self.peers[i].in_backbone;
        let empty = BTreeSet::new();
        let assumed: BTreeSet<u64> = match (fed, newest, self.peers[i].mesh.eligible_upto) {
            (true, Some(n), Some(hi)) => {
                let lo = (n + 1).saturating_sub(self.cfg.mesh.window);
                (lo..=hi.min(n)).collect()
            }
            _ => BTreeSet::new(),
        };
        let mut mesh = std::mem::replace(&mut self.peers[i].mesh, MeshPeer::new(p, 0, 0.0));
        let actions = {
            let views: Vec<NeighborView<'_>> = nb
                .iter()
                .map(|&n| {
                    if n == SERVER {
                        return NeighborView {
                            id: n,
                            has: &self.server_advert,
                            capacity: self.server_rate,
                        };
                    }
                    let s = &self.peers[n.0 as usize];
                    let has = match (fed, s.in_backbone) {
                        (false, _) => &s.advert,
                        (true, true) => &assumed,
                        (true, false) => &empty,
                    };
                    NeighborView {
                        id: n,
                        has,
                        capacity: if fed { s.pull_rate } else { s.advert_capacity },
                    }
                })
                .collect();
            pull_mesh_step(&mut mesh, &views, now, newest, &self.cfg.mesh)
        };
        self.peers[i].mesh = mesh;
        let (mut maps, mut gossip) = (0, 0);
        for a in actions {
            match a {
                MeshAction::BufferMap { to, .. } => {
                    // only peers that pull read buffer maps
                    if to != SERVER && !self.peers[to.0 as usize].in_backbone {
                        maps += 1;
                    }
                }
                MeshAction::Gossip { .. } => gossip += 1,
                MeshAction::Request { chunk, to } => {
                    self.control("request", 1);
                    let d = self.links.get(p, to);
                    self.q.push(now + d, EventKind::PullRequest, Ev::Request { chunk, from: p, to });
                }
            }
        }
        if maps > 0 {
            self.control("buffer_map", maps);
        }
        if gossip > 0 {
            self.control("gossip", gossip);
        }
    }

    fn server_tick(&mut self) {
        let now = self.q.now();
        let n = self.server_neighbors.len() as u64;
        self.control("buffer_map", n);
        if now >= self.next_server_gossip {
            self.refill_server();
            let n = self.server_neighbors.len() as u64;
            self.control("gossip", n);
            self.next_server_gossip += self.cfg.mesh.gossip_period;
        }
        let next = now + self.cfg.mesh.buffermap_period;
        if next <= self.end {
            self.q.push(next, EventKind::BuffermapExchange, Ev::ServerTick);
        }
    }

    fn refill_server(&mut self) {
        let gone: Vec<PeerId> = self.server_neighbors.iter().copied().filter(|p| !self.alive.contains(p)).collect();
        for p in gone {
            self.server_neighbors.remove(&p);
        }
        let want = self.cfg.server_mesh_degree.saturating_sub(self.server_neighbors.len());
        let cand: Vec<PeerId> = self.alive.iter().copied().filter(|p| !self.server_neighbors.contains(p)).collect();
        if want == 0 || cand.is_empty() {
            return;
        }
        let picks = rand::seq::index::sample(&mut self.mesh_rng, cand.len(), want.min(cand.len()));
        for k in picks.iter() {
            let p = cand[k];
            self.server_neighbors.insert(p);
            self.peers[p.0 as usize].neighbors.insert(SERVER);
        }
    }

    /// Tops `p` up to the configured mesh degree with random live partners.
    fn refill(&mut self, p: PeerId) {
        let i = p.0 as usize;
        let gone: Vec<PeerId> = self.peers[i]
            .neighbors
            .iter()
            .copied()
            .filter(|&n| n != SERVER && !self.peers[n.0 as usize].alive)
            .collect();
        for n in gone {
            self.peers[i].neighbors.remove(&n);
        }
        if self.peers[i].neighbors.contains(&SERVER) && !self.server_neighbors.contains(&p) {
            self.peers[i].neighbors.remove(&SERVER);
        }
        let k = self.cfg.mesh.neighbors;
        let have = self.peers[i].neighbors.iter().filter(|&&n| n != SERVER).count();
        if have >= k {
            return;
        }
        let cand: Vec<PeerId> = self
            .alive
            .iter()
            .copied()
            .filter(|&n| n != p && !self.peers[i].neighbors.contains(&n) && self.peers[n.0 as usize].neighbors.len() < 2 * k)
            .collect();
        if cand.is_empty() {
            return;
        }
        let picks = rand::seq::index::sample(&mut self.mesh_rng, cand.len(), (k - have).min(cand.len()));
        for idx in picks.iter() {
            let n = cand[idx];
            self.peers[i].neighbors.insert(n);
            self.peers[n.0 as usize].neighbors.insert(p);
        }
    }

    fn request_arrives(&mut self, chunk: u64, from: PeerId, to: PeerId) {
        let now = self.q.now();
        let (rate, has) = if to == SERVER {
            (self.server_rate, self.newest.is_some_and(|n| chunk <= n))
        } else {
            let s = &self.peers[to.0 as usize];
            if !s.alive {
                return;
            }
            (s.pull_rate, s.mesh.have.contains(&chunk))
        };
        if rate <= 0.0 {
            return;
        }
        let tx = self.cfg.chunk_size / rate;
        let max_backlog = self.cfg.mesh.max_backlog;
        let srv = self.server_of(to);
        let backlog = (srv.busy_until - now).max(0.0) + srv.queue.len() as f64 * tx;
        if !has || backlog > max_backlog + EVENT_QUANTUM {
            self.log(|| format!("reject request {chunk} {from} -> {to}"));
            self.control("reject", 1);
            let d = self.links.get(from, to);
            self.q.push(now + d, EventKind::ControlMsg, Ev::Reject { chunk, to: from, by: to });
            return;
        }
        srv.queue.push_back((from, chunk));
        if !srv.scheduled {
            srv.scheduled = true;
            let at = srv.busy_until.max(now);
            self.q.push(at, EventKind::PullRequest, Ev::Serve(to));
        }
    }

    fn server_of(&mut self, p: PeerId) -> &mut PullServer {
        if p == SERVER {
            &mut self.server
        } else {
            &mut self.peers[p.0 as usize].server
        }
    }

    /// Starts the next queued pull response at `p`; a backbone peer holds it
    /// while pushes are waiting for its uplink.
    fn serve(&mut self, p: PeerId) {
        let now = self.q.now();
        self.server_of(p).scheduled = false;
        if p != SERVER {
            let st = &self.peers[p.0 as usize];
            if !st.alive {
                return;
            }
            if st.in_backbone {
                if let Some(&(ready, start)) = st.push_waits.last() {
                    if ready <= now && now < start - EVENT_QUANTUM {
                        self.peers[p.0 as usize].server.scheduled = true;
                        self.q.push(start, EventKind::PullRequest, Ev::Serve(p));
                        return;
                    }
                }
            }
        }
        let rate = if p == SERVER { self.server_rate } else { self.peers[p.0 as usize].pull_rate };
        loop {
            let Some((to, chunk)) = self.server_of(p).queue.pop_front() else {
                return;
            };
            if !self.peers[to.0 as usize].alive || rate <= 0.0 {
                continue;
            }
            let tx = self.cfg.chunk_size / rate;
            let d = self.links.get(p, to);
            let srv = self.server_of(p);
            srv.busy_until = now + tx;
            let more = !srv.queue.is_empty();
            if more {
                srv.scheduled = true;
            }
            if p != SERVER && self.peers[p.0 as usize].in_backbone {
                self.peers[p.0 as usize].pull_starts.push(now);
            }
            self.report.data_bytes += self.chunk_bytes();
            self.q.push(
                now + tx + d,
                EventKind::TransferComplete,
                Ev::Deliver { chunk, to, from: p, via: Via::Pull, sent: now + tx },
            );
            if more {
                self.q.push(now + tx, EventKind::PullRequest, Ev::Serve(p));
            }
            return;
        }
    }

    fn queue_join(&mut self, p: PeerId) {
        self.pending.push(p);
        if self.join_scheduled {
            return;
        }
        self.join_scheduled = true;
        let now = self.q.now();
        let period = match self.versions.last() {
            Some(Push::Snap { roots, .. }) => roots.len() as f64 * self.tau,
            _ => self.tau,
        };
        let at = ((now / period).floor() + 1.0) * period;
        self.q.push(at, EventKind::ControlMsg, Ev::JoinBatch);
    }

    fn join_batch(&mut self) -> Result<(), SimError> {
        self.join_scheduled = false;
        let joining: Vec<PeerId> = std::mem::take(&mut self.pending)
            .into_iter()
            .filter(|p| self.peers[p.0 as usize].alive)
            .collect();
        if joining.is_empty() {
            return Ok(());
        }
        self.log(|| format!("join {joining:?}"));
        match (&self.overlay, self.cfg.baseline) {
            (Some(o), Baseline::Snap) => {
                let (next, updates) = join_backbone_batch(o, &joining, &self.cfg.level_policy)?;
                self.control("table_update", updates.len() as u64);
                for &p in &joining {
                    self.peers[p.0 as usize].in_backbone = true;
                }
                let push = Push::snap(&next)?;
                self.members = next.peer_order();
                self.overlay = Some(next);
                self.versions.push(push);
            }
            _ => {
                let mut members = self.members.clone();
                members.extend(&joining);
                self.control("table_update", members.len() as u64);
                self.rebuild_from_scratch(members)?;
            }
        }
        Ok(())
    }

    fn depart(&mut self, p: PeerId) -> Result<(), SimError> {
        let i = p.0 as usize;
        if !self.peers[i].alive {
            return Ok(());
        }
        self.log(|| format!("depart {p}"));
        self.peers[i].alive = false;
        self.alive.remove(&p);
        self.pending.retain(|&x| x != p);
        if self.server_neighbors.remove(&p) {
            self.refill_server();
        }
        let nb: Vec<PeerId> = std::mem::take(&mut self.peers[i].neighbors).into_iter().collect();
        for n in nb {
            if n != SERVER {
                self.peers[n.0 as usize].neighbors.remove(&p);
            }
        }
        if let Some(g) = self.groups.remove(&p) {
            self.control("alert", g.members.len() as u64);
            for m in g.members {
                let st = &mut self.peers[m.0 as usize];
                st.sub_parent = None;
                st.pull_rate = st.admission.surplus();
            }
            self.restore_parent_rate(p);
        }
        if let Some(parent) = self.peers[i].sub_parent.take() {
            let members: Vec<PeerId> = self.groups[&parent].members.iter().copied().filter(|&m| m != p).collect();
            self.regroup(parent, members);
        }
        if !self.peers[i].in_backbone {
            return Ok(());
        }
        self.peers[i].in_backbone = false;
        match (self.overlay.take(), self.cfg.baseline) {
            (Some(o), Baseline::Snap) if o.n() >= 3 => {
                let o = &o;
                let alerts: u64 = starvation_alerts(o, p)?.values().map(|v| v.len() as u64).sum();
                self.control("alert", alerts);
                let plan = handle_departure_with(o, p, &self.cfg.level_policy)?;
                self.control("table_update", plan.table_updates.len() as u64);
                let next = plan.apply(o)?;
                let push = Push::snap(&next)?;
                self.members = next.peer_order();
                self.overlay = Some(next);
                self.versions.push(push);
            }
            _ => {
                let members: Vec<PeerId> = self.members.iter().copied().filter(|&m| m != p).collect();
                self.control("alert", 1);
                self.control("table_update", members.len() as u64);
                self.rebuild_from_scratch(members)?;
            }
        }
        Ok(())
    }

    fn restore_parent_rate(&mut self, parent: PeerId) {
        let st = &mut self.peers[parent.0 as usize];
        st.pull_rate = st.admission.surplus();
    }

    fn sub_cost(&self, members: usize) -> f64 {
        match self.cfg.tier2_mode {
            Tier2Mode::SubSnap(f) => f * self.cfg.stream_rate,
            Tier2Mode::SubOpst => members as f64 * self.cfg.stream_rate,
            Tier2Mode::PullMesh => 0.0,
        }
    }

    fn try_attach(&mut self, p: PeerId) {
        let candidates: Vec<PeerId> = self.members.clone();
        for parent in candidates {
            let st = &self.peers[parent.0 as usize];
            if !st.alive || !st.in_backbone {
                continue;
            }
            let size = self.groups.get(&parent).map_or(0, |g| g.members.len());
            if size >= self.cfg.sub_group_size || self.sub_cost(size + 1) > st.admission.surplus() + 1e-9 {
                continue;
            }
            let mut members = self.groups.get(&parent).map(|g| g.members.clone()).unwrap_or_default();
            members.push(p);
            self.peers[p.0 as usize].sub_parent = Some(parent);
            self.regroup(parent, members);
            return;
        }
    }

    fn regroup(&mut self, parent: PeerId, members: Vec<PeerId>) {
        let cfg = self.cfg;
        let surplus = self.peers[parent.0 as usize].admission.surplus();
        if members.is_empty() {
            self.groups.remove(&parent);
            self.restore_parent_rate(parent);
            return;
        }
        match attach_sub_overlay(parent, surplus, &members, cfg.tier2_mode, cfg.stream_rate, self.tau, cfg.packets_per_chunk) {
            Ok(g) => {
                self.control("sub_table", members.len() as u64);
                let cost = self.sub_cost(members.len());
                self.peers[parent.0 as usize].pull_rate = (surplus - cost).max(0.0);
                if let Tier2Mode::SubSnap(f) = cfg.tier2_mode {
                    for &m in &members {
                        let st = &mut self.peers[m.0 as usize];
                        st.pull_rate = (st.admission.surplus() - f * cfg.stream_rate).max(0.0);
                    }
                }
                self.groups.insert(parent, g);
            }
            Err(_) => {
                for m in members {
                    let st = &mut self.peers[m.0 as usize];
                    st.sub_parent = None;
                    st.pull_rate = st.admission.surplus();
                }
                self.groups.remove(&parent);
                self.restore_parent_rate(parent);
            }
        }
    }

    fn finish(mut self) -> MetricsReport {
        let window = self.cfg.mesh.window as f64 * self.tau;
        let mut lost = 0;
        for st in &self.peers {
            if !st.accepted {
                continue;
            }
            let until = st.depart.min(self.end);
            for c in st.mesh.playback_point..self.num {
                let deadline = c as f64 * self.tau + window;
                if deadline <= until && !st.mesh.have.contains(&c) {
                    lost += 1;
                }
            }
        }
        self.report.lost = lost;
        let mut violations = 0;
        for st in &self.peers {
            for &s in &st.pull_starts {
                let k = st.push_waits.partition_point(|&(ready, _)| ready <= s);
                if k > 0 && s < st.push_waits[k - 1].1 - EVENT_QUANTUM {
                    violations += 1;
                }
            }
            if st.in_backbone && st.pull_rate + self.cfg.stream_rate > st.profile.upload_bw + 1e-9 {
                self.report.bandwidth_violations += 1;
            }
        }
        self.report.priority_violations = violations;
        self.report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::run_backbone_sim;
    use crate::overlay::{peers, LevelPolicy};

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn degenerate_matches_backbone() {
        let cfg = ScenarioConfig::calibration(16, 0.3, 1.0, 40);
        let o = build_overlay(&peers(0..16), &LevelPolicy::Auto).unwrap();
        let a = run_backbone_sim(&o, &cfg).unwrap();
        let b = run_hybrid_sim(&cfg).unwrap();
        assert_eq!(sorted(a.delays()), sorted(b.delays()));
        assert_eq!(b.lost, 0);
        assert_eq!(b.priority_violations, 0);
    }

    fn scenario(baseline: Baseline, seed: u64) -> ScenarioConfig {
        let mut c = ScenarioConfig::hybrid_default(seed);
        c.session_length = 120.0;
        c.max_peers = 60;
        c.baseline = baseline;
        c
    }

    #[test]
    fn reproducible() {
        let a = run_hybrid_sim(&scenario(Baseline::Snap, 4)).unwrap();
        let b = run_hybrid_sim(&scenario(Baseline::Snap, 4)).unwrap();
        assert_eq!(a, b);
        assert!(a.overhead() > 0.0 && a.overhead() < 1.0);
        assert!(a.delays().iter().all(|&d| d >= 0.0));
        assert_eq!(a.priority_violations, 0);
        assert_eq!(a.bandwidth_violations, 0);
    }

    #[test]
    fn other_modes_run() {
        for b in [Baseline::PullOnly, Baseline::MultiOpst] {
            let r = run_hybrid_sim(&scenario(b, 2)).unwrap();
            assert!(!r.playback_delay.is_empty());
        }
        for m in [Tier2Mode::SubSnap(0.5), Tier2Mode::SubOpst] {
            let mut c = scenario(Baseline::Snap, 2);
            c.tier2_mode = m;
            c.upload_bw_range = [1.0, 4.0];
            let r = run_hybrid_sim(&c).unwrap();
            let subs = r.playback_delay.iter().filter(|s| s.via == Via::Sub).count();
            assert!(subs > 0, "{m:?}");
        }
    }
}
