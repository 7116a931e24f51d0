//! The simulated network: nodes, radio, protocol handlers and the event loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::mobility::{rwp_step, Leg, RwpParams};
use super::queue::EventQueue;
use super::radio::{in_range, is_connected, latency, unit_disk, Point};
use super::rng::{substream, Purpose};
use super::scenario::{LookupMode, Mobility, Scenario};
use super::traffic::{traffic_gen, Flow};
use crate::addressing::{Level, NetAddress, NodeId};
use crate::allocation::{found_network, AllocationState, ConflictKind, ConflictMonitor, JoinOutcome, Phase};
use crate::error::ScenarioError;
use crate::forwarding::{forward, on_ack_timeout, DataPacket, DropReason, ForwardAction, InvalidationSet, PacketKind};
use crate::lookup::{hash_id, IdAddressPair, PairCache};
use crate::metrics::{bfs_oracle, finalize, Collector, MetricEvent, RunContext, RunKey, RunMetrics};
use crate::routing::{HelloPacket, RoutingTable};
use crate::time::{to_secs, Micros};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Hash every dispatched event into a trace digest.
    pub trace_hash: bool,
    /// Keep the trace lines themselves.
    pub trace_lines: bool,
    /// Record the path and outcome of every lookup packet.
    pub record_lookups: bool,
}

#[derive(Clone, Debug)]
struct Envelope {
    packet: DataPacket,
    origin: usize,
    sent_at: Micros,
    shortest: Option<u32>,
    path: Vec<usize>,
    record: Option<usize>,
}

#[derive(Debug)]
enum Event {
    Boot(usize),
    Hello(usize),
    Announce {
        node: usize,
        epoch: u64,
    },
    JoinDecide {
        node: usize,
        epoch: u64,
    },
    JoinTimeout {
        node: usize,
        epoch: u64,
    },
    Listen {
        node: usize,
        epoch: u64,
    },
    HelloArrive {
        to: usize,
        hello: Arc<HelloPacket>,
    },
    Arrive {
        to: usize,
        env: Box<Envelope>,
    },
    AckTimeout {
        node: usize,
        hop: NetAddress,
        level: Level,
        env: Box<Envelope>,
    },
    FlowSend(usize),
    Publish {
        node: usize,
        epoch: u64,
    },
    NarqTimeout {
        node: usize,
        epoch: u64,
        target: NodeId,
        attempt: u8,
    },
    Waypoint(usize),
    LinkDown(usize, usize),
    Sample,
}

#[derive(Clone, Debug, Default)]
struct Pending {
    attempt: u8,
    queued: Vec<Envelope>,
    probe: Option<usize>,
}

struct Node {
    id: NodeId,
    booted: bool,
    listening: bool,
    pinned: Option<NetAddress>,
    alloc: AllocationState,
    table: Option<RoutingTable>,
    monitor: ConflictMonitor,
    inval: InvalidationSet,
    cache: PairCache,
    epoch: u64,
    leg: Leg,
    mobility_rng: ChaCha8Rng,
    backoff_rng: ChaCha8Rng,
    previous_addr: Option<NetAddress>,
    pending: BTreeMap<NodeId, Pending>,
}

impl Node {
    fn addr(&self) -> Option<NetAddress> {
        self.table.as_ref().map(RoutingTable::owner_addr)
    }
}

/// Where a lookup packet ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupEnd {
    InFlight,
    /// NAUP stored at this node.
    Anchored(usize),
    /// NARQ answered by this node.
    Answered(usize),
    /// NARP reached its requester.
    Delivered(usize),
    /// NARQ reached the anchor, which held no pair.
    NotFound(usize),
    Dropped(DropReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LookupRecord {
    pub kind: PacketKind,
    pub started: Micros,
    pub pairs: Vec<IdAddressPair>,
    pub target: Option<NodeId>,
    pub path: Vec<usize>,
    pub end: LookupEnd,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub src: usize,
    pub target: NodeId,
    pub started: Micros,
    pub resolved: Option<(Micros, NetAddress)>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub seq: u64,
    pub src: usize,
    pub dst: usize,
    pub sent_at: Micros,
    pub delivered_at: Micros,
    pub hops: u8,
    pub path: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropRecord {
    pub seq: u64,
    pub src: usize,
    pub sent_at: Micros,
    pub at: Micros,
    pub reason: DropReason,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub deliveries: Vec<DeliveryRecord>,
    pub drops: Vec<DropRecord>,
    pub final_addresses: Vec<Option<NetAddress>>,
    pub final_adjacency: Vec<Vec<usize>>,
    pub ids: Vec<NodeId>,
    pub trace_hash: Option<String>,
    pub trace: Vec<String>,
}

pub struct Simulator {
    sc: Scenario,
    opts: SimOptions,
    now: Micros,
    queue: EventQueue<Event>,
    nodes: Vec<Node>,
    flows: Vec<Flow>,
    fixed_adj: Option<Vec<Vec<usize>>>,
    failed: Vec<(usize, usize)>,
    rwp: Option<RwpParams>,
    holders: BTreeMap<NetAddress, Vec<usize>>,
    index_of: BTreeMap<NodeId, usize>,
    loss_rng: ChaCha8Rng,
    metrics: Collector,
    next_seq: u64,
    deliveries: Vec<DeliveryRecord>,
    drops: Vec<DropRecord>,
    lookups: Vec<LookupRecord>,
    probes: Vec<Probe>,
    hasher: Option<Sha256>,
    trace: Vec<String>,
}

fn draw_ids(sc: &Scenario) -> Vec<NodeId> {
    if let Some(ids) = &sc.ids {
        return ids.clone();
    }
    let mut rng = substream(sc.seed, Purpose::Ids, 0);
    let mut seen = std::collections::BTreeSet::new();
    let mut ids = Vec::with_capacity(sc.nodes);
    while ids.len() < sc.nodes {
        let id = rng.gen_range(1..u32::MAX);
        if seen.insert(id) {
            ids.push(NodeId(id));
        }
    }
    ids
}

fn place(sc: &Scenario) -> Result<Vec<Point>, ScenarioError> {
    if let Some(p) = &sc.positions {
        return Ok(p.clone());
    }
    let mut rng = substream(sc.seed, Purpose::Placement, 0);
    for _ in 0..10_000 {
        let pts: Vec<Point> = (0..sc.nodes)
            .map(|_| Point::new(rng.gen_range(0.0..=sc.width), rng.gen_range(0.0..=sc.height)))
            .collect();
        if !sc.require_connected || sc.adjacency.is_some() || is_connected(&unit_disk(&pts, sc.radio_radius)) {
            return Ok(pts);
        }
    }
    Err(ScenarioError::invalid(
        "require_connected",
        "no connected placement found in 10000 draws",
    ))
}

impl Simulator {
    pub fn new(sc: Scenario, opts: SimOptions) -> Result<Simulator, ScenarioError> {
        let positions = place(&sc)?;
        let ids = draw_ids(&sc);
        let rwp = match sc.mobility {
            Mobility::Static => None,
            Mobility::RandomWaypoint {
                speed_min,
                speed_max,
                pause_min,
                pause_max,
            } => Some(RwpParams {
                speed_min,
                speed_max,
                pause_min,
                pause_max,
                width: sc.width,
                height: sc.height,
            }),
        };
        let fixed_adj = match (&sc.adjacency, rwp) {
            (Some(m), _) => Some(
                m.iter()
                    .map(|row| row.iter().enumerate().filter(|(_, v)| **v).map(|(j, _)| j).collect())
                    .collect(),
            ),
            (None, None) => Some(unit_disk(&positions, sc.radio_radius)),
            (None, Some(_)) => None,
        };

        let mut queue = EventQueue::default();
        let mut boot_rng = substream(sc.seed, Purpose::Boot, 0);
        let mut nodes = Vec::with_capacity(sc.nodes);
        for (i, (p, id)) in positions.iter().zip(&ids).enumerate() {
            let idx = i as u32;
            let mut mobility_rng = substream(sc.seed, Purpose::Mobility, idx);
            let leg = match &rwp {
                Some(params) => {
                    let leg = rwp_step(params, *p, 0, &mut mobility_rng);
                    queue.push(leg.arrive, Event::Waypoint(i));
                    leg
                }
                None => Leg::stationary(*p),
            };
            let boot = if sc.boot_window > 0 {
                boot_rng.gen_range(0..=sc.boot_window)
            } else {
                0
            };
            queue.push(boot, Event::Boot(i));
            nodes.push(Node {
                id: *id,
                booted: false,
                listening: false,
                pinned: sc.addresses.as_ref().map(|a| a[i]),
                alloc: AllocationState::default(),
                table: None,
                monitor: ConflictMonitor::default(),
                inval: InvalidationSet::default(),
                cache: PairCache::new(sc.cache),
                epoch: 0,
                leg,
                mobility_rng,
                backoff_rng: substream(sc.seed, Purpose::Backoff, idx),
                previous_addr: None,
                pending: BTreeMap::new(),
            });
        }

        let mut flows: Vec<Flow> = sc
            .flows
            .iter()
            .map(|f| Flow {
                src: f.src,
                dst: f.dst,
                rate: f.rate.unwrap_or(sc.traffic.global_load / sc.flows.len() as f64),
                start: crate::time::from_secs(f.start),
                end: crate::time::from_secs(f.end),
                payload_bytes: sc.traffic.payload_bytes,
            })
            .collect();
        if sc.flows.is_empty() {
            flows = traffic_gen(sc.nodes, &sc.traffic, &mut substream(sc.seed, Purpose::Traffic, 0));
        }
        for (k, f) in flows.iter().enumerate() {
            if f.start < f.end && f.rate > 0.0 {
                queue.push(f.start, Event::FlowSend(k));
            }
        }
        for lf in &sc.link_failures {
            queue.push(crate::time::from_secs(lf.at), Event::LinkDown(lf.a, lf.b));
        }
        queue.push(sc.sample_period, Event::Sample);

        let index_of = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Ok(Simulator {
            loss_rng: substream(sc.seed, Purpose::Loss, 0),
            hasher: (opts.trace_hash || opts.trace_lines).then(Sha256::new),
            sc,
            opts,
            now: 0,
            queue,
            nodes,
            flows,
            fixed_adj,
            failed: Vec::new(),
            rwp,
            holders: BTreeMap::new(),
            index_of,
            metrics: Collector::default(),
            next_seq: 0,
            deliveries: Vec::new(),
            drops: Vec::new(),
            lookups: Vec::new(),
            probes: Vec::new(),
            trace: Vec::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn id(&self, i: usize) -> NodeId {
        self.nodes[i].id
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn address(&self, i: usize) -> Option<NetAddress> {
        self.nodes[i].addr()
    }

    pub fn table(&self, i: usize) -> Option<&RoutingTable> {
        self.nodes[i].table.as_ref()
    }

    pub fn cache(&self, i: usize) -> &PairCache {
        &self.nodes[i].cache
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn lookups(&self) -> &[LookupRecord] {
        &self.lookups
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn metrics(&self) -> &Collector {
        &self.metrics
    }

    pub fn position(&self, i: usize) -> Point {
        self.nodes[i].leg.position(self.now)
    }

    fn link_failed(&self, a: usize, b: usize) -> bool {
        self.failed.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
    }

    fn linked(&self, a: usize, b: usize) -> bool {
        if a == b || self.link_failed(a, b) {
            return false;
        }
        match &self.fixed_adj {
            Some(adj) => adj[a].binary_search(&b).is_ok(),
            None => in_range(self.position(a), self.position(b), self.sc.radio_radius),
        }
    }

    /// Physical neighbours of `i` at the current instant.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        match &self.fixed_adj {
            Some(adj) => adj[i].iter().copied().filter(|&j| !self.link_failed(i, j)).collect(),
            None => (0..self.nodes.len()).filter(|&j| self.linked(i, j)).collect(),
        }
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.nodes.len()).map(|i| self.neighbors(i)).collect()
    }

    fn emit(&mut self, kind: &str, node: usize, details: std::fmt::Arguments<'_>) {
        if let Some(h) = self.hasher.as_mut() {
            let line = format!("{} {kind} {node} {details}", self.now);
            h.update(line.as_bytes());
            h.update(b"\n");
            if self.opts.trace_lines {
                self.trace.push(line);
            }
        }
    }

    fn lost(&mut self) -> bool {
        self.sc.loss > 0.0 && self.loss_rng.gen::<f64>() < self.sc.loss
    }

    fn latency(&self, bytes: usize) -> Micros {
        latency(bytes, self.sc.link_rate, self.sc.propagation)
    }

    fn backoff(&mut self, i: usize) -> Micros {
        let p = self.sc.hello_period;
        self.nodes[i].backoff_rng.gen_range(1..=p)
    }

    /// Run every event up to and including `until`, capped at the scenario duration.
    pub fn run_until(&mut self, until: Micros) {
        let until = until.min(self.sc.duration);
        while let Some(t) = self.queue.peek_time() {
            if t > until {
                break;
            }
            let (t, ev) = self.queue.pop().expect("peeked");
            self.now = t;
            self.dispatch(ev);
        }
        self.now = self.now.max(until);
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Boot(i) => self.on_boot(i),
            Event::Hello(i) => self.on_hello_due(i),
            Event::Announce { node, epoch } => {
                if self.nodes[node].epoch == epoch {
                    self.broadcast_hello(node);
                }
            }
            Event::JoinDecide { node, epoch } => self.on_join_decide(node, epoch),
            Event::JoinTimeout { node, epoch } => self.on_join_timeout(node, epoch),
            Event::Listen { node, epoch } => self.on_listen(node, epoch),
            Event::HelloArrive { to, hello } => self.on_hello_arrive(to, &hello),
            Event::Arrive { to, env } => self.on_arrive(to, *env),
            Event::AckTimeout { node, hop, level, env } => self.on_ack_timeout(node, hop, level, *env),
            Event::FlowSend(k) => self.on_flow_send(k),
            Event::Publish { node, epoch } => self.on_publish(node, epoch),
            Event::NarqTimeout {
                node,
                epoch,
                target,
                attempt,
            } => self.on_narq_timeout(node, epoch, target, attempt),
            Event::Waypoint(i) => self.on_waypoint(i),
            Event::LinkDown(a, b) => {
                self.emit("LINKDOWN", a, format_args!("{b}"));
                self.failed.push((a, b));
            }
            Event::Sample => self.on_sample(),
        }
    }

    // ---- allocation ----

    fn bump_epoch(&mut self, i: usize) -> u64 {
        self.nodes[i].epoch += 1;
        self.nodes[i].epoch
    }

    fn on_boot(&mut self, i: usize) {
        self.nodes[i].booted = true;
        let id = self.nodes[i].id.0;
        self.emit("BOOT", i, format_args!("{id}"));
        let jitter = self.nodes[i].backoff_rng.gen_range(0..self.sc.hello_period);
        self.queue.push(self.now + jitter, Event::Hello(i));
        match self.nodes[i].pinned {
            Some(addr) => {
                self.nodes[i].alloc.acquire(addr, self.now);
                self.take_address(i, addr);
            }
            None => self.start_listening(i),
        }
    }

    fn start_listening(&mut self, i: usize) {
        let epoch = self.bump_epoch(i);
        let n = &mut self.nodes[i];
        n.listening = true;
        n.alloc.reset_listening();
        self.queue
            .push(self.now + self.sc.join_timeout, Event::JoinTimeout { node: i, epoch });
    }

    fn on_listen(&mut self, i: usize, epoch: u64) {
        if self.nodes[i].epoch == epoch && self.nodes[i].alloc.phase != Phase::Addressed {
            self.start_listening(i);
        }
    }

    fn on_join_timeout(&mut self, i: usize, epoch: u64) {
        let n = &self.nodes[i];
        if n.epoch != epoch || n.alloc.phase != Phase::Unaddressed {
            return;
        }
        let addr = found_network(self.sc.address_bits).expect("validated width");
        self.nodes[i].alloc.acquire(addr, self.now);
        self.emit("FOUND", i, format_args!("{addr}"));
        self.take_address(i, addr);
    }

    fn on_join_decide(&mut self, i: usize, epoch: u64) {
        if self.nodes[i].epoch != epoch || self.nodes[i].alloc.phase == Phase::Addressed {
            return;
        }
        let before = self.nodes[i].alloc.last_invalid_at;
        let outcome = self.nodes[i].alloc.attempt_join(self.sc.selection, self.now);
        if self.nodes[i].alloc.last_invalid_at != before {
            self.metrics.record(MetricEvent::Invalid { at: self.now });
        }
        match outcome {
            JoinOutcome::Acquired { addr, via } => {
                self.emit("JOIN", i, format_args!("{addr} via {via}"));
                self.take_address(i, addr);
            }
            JoinOutcome::Exhausted => {
                self.emit("EXHAUSTED", i, format_args!(""));
                let epoch = self.bump_epoch(i);
                self.nodes[i].listening = false;
                self.nodes[i].alloc.reset_listening();
                let wait = self.backoff(i);
                self.queue.push(self.now + wait, Event::Listen { node: i, epoch });
            }
        }
    }

    fn take_address(&mut self, i: usize, addr: NetAddress) {
        let epoch = self.bump_epoch(i);
        let max_age = self.sc.hello_max_age();
        let n = &mut self.nodes[i];
        n.table = Some(RoutingTable::new(addr, n.id, self.sc.mode).with_max_age(max_age));
        n.listening = false;
        n.monitor.reset();
        n.inval.clear();
        n.cache.clear_anchors();
        let previous = n.previous_addr.replace(addr);
        self.metrics
            .record(MetricEvent::AddressAcquired { previous, new: addr });
        self.holders.entry(addr).or_default().push(i);
        self.queue.push(self.now, Event::Announce { node: i, epoch });
        if self.sc.lookup == LookupMode::Dht {
            self.send_naup(i);
            self.queue
                .push(self.now + self.sc.publish_period, Event::Publish { node: i, epoch });
        }
    }

    fn relinquish(&mut self, i: usize, kind: ConflictKind, level: Level) {
        let Some(addr) = self.nodes[i].addr() else {
            return;
        };
        self.emit("YIELD", i, format_args!("{addr} {kind:?}"));
        self.metrics.record(match kind {
            ConflictKind::Duplicate => MetricEvent::Duplicate { at: self.now },
            ConflictKind::Invalid => MetricEvent::Invalid { at: self.now },
        });
        if let Some(v) = self.holders.get_mut(&addr) {
            v.retain(|x| *x != i);
            if v.is_empty() {
                self.holders.remove(&addr);
            }
        }
        let epoch = self.bump_epoch(i);
        let n = &mut self.nodes[i];
        n.alloc
            .relinquish(kind, level, self.sc.selection, self.now, self.sc.probation);
        n.table = None;
        n.listening = false;
        n.monitor.reset();
        n.inval.clear();
        n.cache.clear_anchors();
        let pending = std::mem::take(&mut n.pending);
        for (_, p) in pending {
            if let Some(k) = p.probe {
                self.probes[k].failed = true;
            }
            for env in p.queued {
                self.drop_packet(env, DropReason::Unaddressed);
            }
        }
        let wait = self.backoff(i);
        self.queue.push(self.now + wait, Event::Listen { node: i, epoch });
    }

    // ---- hellos ----

    fn on_hello_due(&mut self, i: usize) {
        self.queue.push(self.now + self.sc.hello_period, Event::Hello(i));
        let now = self.now;
        let hold = self.sc.conflict_hold;
        let probation = self.sc.probation;
        let max_age = self.sc.hello_max_age();
        let n = &mut self.nodes[i];
        let pinned = n.pinned.is_some();
        let Some(table) = n.table.as_mut() else {
            return;
        };
        table.expire(now, max_age);
        n.inval.purge(now);
        if !pinned {
            if let Some(ev) = n.monitor.evaluate(table, now, hold) {
                let own = table.subtree_nid(ev.level).0;
                self.emit(
                    "CLAIM",
                    i,
                    format_args!("level {} other {} own {own}", ev.level, ev.other.0),
                );
                self.relinquish(i, ev.kind, ev.level);
                return;
            }
            if n.alloc.acquired_at.is_some_and(|t| now >= t + probation) {
                n.alloc.confirm();
            }
        }
        self.broadcast_hello(i);
    }

    fn broadcast_hello(&mut self, i: usize) {
        let n = &self.nodes[i];
        let Some(table) = n.table.as_ref() else {
            return;
        };
        let mut hello = table.build_hello();
        if self.sc.lookup == LookupMode::Dht {
            hello.piggyback = n.cache.piggyback(self.now);
        }
        let bytes = hello.wire_len();
        self.metrics.record(MetricEvent::Hello {
            bytes,
            routing_bytes: hello.routing_rows_len(),
        });
        self.emit(
            "HELLO",
            i,
            format_args!("{} {} rows {bytes}B", hello.sender_addr, hello.rows.len()),
        );
        let hello = Arc::new(hello);
        let at = self.now + self.latency(bytes);
        for j in self.neighbors(i) {
            if !self.lost() {
                self.queue.push(
                    at,
                    Event::HelloArrive {
                        to: j,
                        hello: Arc::clone(&hello),
                    },
                );
            }
        }
    }

    fn on_hello_arrive(&mut self, j: usize, hello: &HelloPacket) {
        let now = self.now;
        let dht = self.sc.lookup == LookupMode::Dht;
        let n = &mut self.nodes[j];
        if !n.booted {
            return;
        }
        match n.table.as_mut() {
            Some(table) => {
                let report = table.process_hello(hello, now);
                if report.malformed_rows > 0 {
                    self.metrics.record(MetricEvent::MalformedRows(report.malformed_rows));
                }
                if let Some(other) = report.duplicate_of {
                    // The network with the larger NID gives way, so a joiner bridging
                    // two partitions is not evicted by the one it is not joining.
                    let own = (table.network_nid(), n.id);
                    if n.pinned.is_none() && own > (hello.network_nid(), other) {
                        self.relinquish(j, ConflictKind::Duplicate, 0);
                        return;
                    }
                }
                if dht {
                    n.cache.absorb_piggyback(&hello.piggyback);
                }
            }
            None => {
                if n.listening && n.alloc.hear(hello) {
                    let epoch = n.epoch;
                    let wait = self.sc.hello_period + self.backoff(j);
                    self.queue.push(now + wait, Event::JoinDecide { node: j, epoch });
                }
            }
        }
    }

    // ---- mobility, sampling ----

    fn on_waypoint(&mut self, i: usize) {
        let Some(params) = self.rwp else {
            return;
        };
        let now = self.now;
        let n = &mut self.nodes[i];
        let leg = rwp_step(&params, n.leg.to, now, &mut n.mobility_rng);
        n.leg = leg;
        self.queue.push(leg.arrive, Event::Waypoint(i));
    }

    fn on_sample(&mut self) {
        let sizes: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| n.table.as_ref().map(RoutingTable::len))
            .collect();
        if !sizes.is_empty() {
            let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
            self.metrics.record(MetricEvent::TableSample { mean_entries: mean });
        }
        self.queue.push(self.now + self.sc.sample_period, Event::Sample);
    }

    // ---- data path ----

    fn blank_packet(&mut self, kind: PacketKind, src: usize) -> DataPacket {
        let zero = NetAddress::zero(self.sc.address_bits).expect("validated width");
        let seq = self.next_seq;
        self.next_seq += 1;
        DataPacket {
            kind,
            src_id: self.nodes[src].id,
            dst_id: self.nodes[src].id,
            src_addr: self.nodes[src].addr().unwrap_or(zero),
            dst_addr: zero,
            ttl: self.sc.ttl,
            hop_count: 0,
            payload_len: 0,
            seq,
            retries: 0,
            target_id: None,
            pairs: Vec::new(),
        }
    }

    fn on_flow_send(&mut self, k: usize) {
        let f = self.flows[k];
        let next = self.now + f.interval();
        if next < f.end {
            self.queue.push(next, Event::FlowSend(k));
        }
        let mut packet = self.blank_packet(PacketKind::Data, f.src);
        packet.dst_id = self.nodes[f.dst].id;
        packet.payload_len = f.payload_bytes;
        let shortest = bfs_oracle(&self.adjacency(), f.src, f.dst);
        self.metrics.record(MetricEvent::DataSent);
        self.emit("SEND", f.src, format_args!("{} -> {}", packet.seq, f.dst));
        let env = Envelope {
            packet,
            origin: f.src,
            sent_at: self.now,
            shortest,
            path: vec![f.src],
            record: None,
        };
        self.originate(f.src, env);
    }

    fn originate(&mut self, i: usize, mut env: Envelope) {
        let Some(own) = self.nodes[i].addr() else {
            return self.drop_packet(env, DropReason::Unaddressed);
        };
        env.packet.src_addr = own;
        let dst_id = env.packet.dst_id;
        match self.sc.lookup {
            LookupMode::Oracle => {
                let dst = self.index_of[&dst_id];
                match self.nodes[dst].addr() {
                    Some(a) => {
                        env.packet.dst_addr = a;
                        self.route(i, env);
                    }
                    None => self.drop_packet(env, DropReason::Unresolved),
                }
            }
            LookupMode::Dht => {
                if let Some(p) = self.nodes[i].cache.get(dst_id, self.now) {
                    env.packet.dst_addr = p.addr;
                    return self.route(i, env);
                }
                let fresh = !self.nodes[i].pending.contains_key(&dst_id);
                self.nodes[i].pending.entry(dst_id).or_default().queued.push(env);
                if fresh {
                    self.send_narq(i, dst_id, 0);
                }
            }
        }
    }

    fn route(&mut self, i: usize, mut env: Envelope) {
        let snapshot = env.clone();
        let n = &self.nodes[i];
        let Some(table) = n.table.as_ref() else {
            return self.drop_packet(env, DropReason::Unaddressed);
        };
        let action = forward(&mut env.packet, table, &n.inval, &self.sc.forward, self.now);
        self.apply(i, env, snapshot, action);
    }

    fn apply(&mut self, i: usize, env: Envelope, snapshot: Envelope, action: ForwardAction) {
        match action {
            ForwardAction::Transmit { next_hop, level } => self.transmit(i, env, snapshot, next_hop, level),
            ForwardAction::Deliver => self.deliver(i, env),
            ForwardAction::Anchor => self.anchor(i, env),
            ForwardAction::Drop(r) => self.drop_packet(env, r),
        }
    }

    fn transmit(&mut self, i: usize, env: Envelope, snapshot: Envelope, hop: NetAddress, level: Level) {
        let bytes = env.packet.wire_len();
        if env.packet.kind != PacketKind::Data {
            self.metrics.record(MetricEvent::Control {
                kind: env.packet.kind,
                bytes,
            });
        }
        let receiver = self
            .holders
            .get(&hop)
            .and_then(|v| v.iter().copied().filter(|&j| self.linked(i, j)).min());
        self.emit(
            "TX",
            i,
            format_args!("{} {} -> {hop} {:?}", env.packet.kind, env.packet.seq, receiver),
        );
        match receiver {
            Some(j) if !self.lost() => {
                let at = self.now + self.latency(bytes);
                self.queue.push(
                    at,
                    Event::Arrive {
                        to: j,
                        env: Box::new(env),
                    },
                );
            }
            _ => {
                let at = self.now + self.sc.ack_timeout;
                self.queue.push(
                    at,
                    Event::AckTimeout {
                        node: i,
                        hop,
                        level,
                        env: Box::new(snapshot),
                    },
                );
            }
        }
    }

    fn on_ack_timeout(&mut self, i: usize, hop: NetAddress, level: Level, mut env: Envelope) {
        self.emit("ACKTIMEOUT", i, format_args!("{} {hop}", env.packet.seq));
        let snapshot = env.clone();
        let now = self.now;
        let n = &mut self.nodes[i];
        let Some(table) = n.table.as_ref() else {
            return self.drop_packet(env, DropReason::Unaddressed);
        };
        let action = on_ack_timeout(&mut env.packet, hop, level, table, &mut n.inval, &self.sc.forward, now);
        // A re-forward starts from the state before this hop was attempted.
        let mut snapshot = snapshot;
        snapshot.packet.retries = env.packet.retries;
        self.apply(i, env, snapshot, action);
    }

    fn on_arrive(&mut self, j: usize, mut env: Envelope) {
        env.path.push(j);
        env.packet.retries = 0;
        self.emit("RX", j, format_args!("{} {}", env.packet.kind, env.packet.seq));
        if self.nodes[j].table.is_none() {
            return self.drop_packet(env, DropReason::Unaddressed);
        }
        let now = self.now;
        match env.packet.kind {
            PacketKind::Data => self.route(j, env),
            PacketKind::Naup => {
                self.nodes[j].cache.learn(env.packet.pairs[0]);
                self.route(j, env);
            }
            PacketKind::Narq => {
                let requester = env.packet.pairs[0];
                self.nodes[j].cache.learn(requester);
                let target = env.packet.target_id.expect("narq carries a target");
                match self.nodes[j].cache.get(target, now) {
                    Some(found) => self.reply(j, env, found),
                    None => self.route(j, env),
                }
            }
            PacketKind::Narp => {
                for p in env.packet.pairs.clone() {
                    self.nodes[j].cache.learn(p);
                }
                self.route(j, env);
            }
        }
    }

    fn deliver(&mut self, j: usize, env: Envelope) {
        let here = self.nodes[j].id;
        match env.packet.kind {
            PacketKind::Data if here == env.packet.dst_id => {
                self.emit(
                    "DELIVER",
                    j,
                    format_args!("{} hops {}", env.packet.seq, env.packet.hop_count),
                );
                self.metrics.record(MetricEvent::DataDelivered {
                    hops: env.packet.hop_count,
                    shortest: env.shortest,
                });
                self.deliveries.push(DeliveryRecord {
                    seq: env.packet.seq,
                    src: env.origin,
                    dst: j,
                    sent_at: env.sent_at,
                    delivered_at: self.now,
                    hops: env.packet.hop_count,
                    path: env.path,
                });
            }
            PacketKind::Narp if here == env.packet.dst_id => {
                self.finish_lookup(&env, LookupEnd::Delivered(j));
                self.complete_resolve(j, &env.packet.pairs);
            }
            _ => self.drop_packet(env, DropReason::Misdelivered),
        }
    }

    fn anchor(&mut self, j: usize, env: Envelope) {
        match env.packet.kind {
            PacketKind::Naup => {
                let pair = env.packet.pairs[0];
                self.emit("ANCHOR", j, format_args!("{} {}", pair.id.0, pair.addr));
                self.nodes[j].cache.anchor(pair);
                self.finish_lookup(&env, LookupEnd::Anchored(j));
            }
            PacketKind::Narq => {
                let target = env.packet.target_id.expect("narq carries a target");
                match self.nodes[j].cache.get(target, self.now) {
                    Some(found) => self.reply(j, env, found),
                    None => {
                        self.emit("NOTFOUND", j, format_args!("{}", target.0));
                        self.finish_lookup(&env, LookupEnd::NotFound(j));
                    }
                }
            }
            _ => self.drop_packet(env, DropReason::Misdelivered),
        }
    }

    fn drop_packet(&mut self, env: Envelope, reason: DropReason) {
        self.emit(
            "DROP",
            env.origin,
            format_args!("{} {} {}", env.packet.kind, env.packet.seq, reason.as_str()),
        );
        if env.packet.kind == PacketKind::Data {
            self.metrics.record(MetricEvent::DataDropped(reason));
            self.drops.push(DropRecord {
                seq: env.packet.seq,
                src: env.origin,
                sent_at: env.sent_at,
                at: self.now,
                reason,
            });
        } else {
            self.finish_lookup(&env, LookupEnd::Dropped(reason));
        }
    }

    // ---- lookup ----

    fn start_lookup(&mut self, kind: PacketKind, src: usize, packet: DataPacket) {
        let record = self.opts.record_lookups.then(|| {
            self.lookups.push(LookupRecord {
                kind,
                started: self.now,
                pairs: packet.pairs.clone(),
                target: packet.target_id,
                path: vec![src],
                end: LookupEnd::InFlight,
            });
            self.lookups.len() - 1
        });
        let env = Envelope {
            packet,
            origin: src,
            sent_at: self.now,
            shortest: None,
            path: vec![src],
            record,
        };
        self.route(src, env);
    }

    fn finish_lookup(&mut self, env: &Envelope, end: LookupEnd) {
        if let Some(r) = env.record {
            let rec = &mut self.lookups[r];
            rec.path = env.path.clone();
            rec.end = end;
        }
    }

    fn own_pair(&self, i: usize) -> Option<IdAddressPair> {
        Some(IdAddressPair {
            id: self.nodes[i].id,
            addr: self.nodes[i].addr()?,
            learned_at: self.now,
        })
    }

    fn send_naup(&mut self, i: usize) {
        let Some(pair) = self.own_pair(i) else {
            return;
        };
        let mut p = self.blank_packet(PacketKind::Naup, i);
        p.dst_addr = hash_id(pair.id, self.sc.address_bits);
        p.pairs = vec![pair];
        self.emit("NAUP", i, format_args!("{} -> {}", pair.addr, p.dst_addr));
        self.start_lookup(PacketKind::Naup, i, p);
    }

    fn on_publish(&mut self, i: usize, epoch: u64) {
        if self.nodes[i].epoch == epoch && self.nodes[i].table.is_some() {
            self.send_naup(i);
            self.queue
                .push(self.now + self.sc.publish_period, Event::Publish { node: i, epoch });
        }
    }

    fn send_narq(&mut self, i: usize, target: NodeId, attempt: u8) {
        let Some(pair) = self.own_pair(i) else {
            return;
        };
        let epoch = self.nodes[i].epoch;
        if let Some(p) = self.nodes[i].pending.get_mut(&target) {
            p.attempt = attempt;
        }
        self.queue.push(
            self.now + self.sc.narq_timeout,
            Event::NarqTimeout {
                node: i,
                epoch,
                target,
                attempt,
            },
        );
        let mut p = self.blank_packet(PacketKind::Narq, i);
        p.dst_addr = hash_id(target, self.sc.address_bits);
        p.dst_id = target;
        p.target_id = Some(target);
        p.pairs = vec![pair];
        self.emit("NARQ", i, format_args!("{} -> {}", target.0, p.dst_addr));
        // The requester may itself be the anchor.
        if let Some(found) = self.nodes[i].cache.anchored(target).copied() {
            return self.complete_resolve(i, &[pair, found]);
        }
        self.start_lookup(PacketKind::Narq, i, p);
    }

    fn reply(&mut self, j: usize, narq: Envelope, found: IdAddressPair) {
        self.finish_lookup(&narq, LookupEnd::Answered(j));
        let requester = narq.packet.pairs[0];
        let Some(own) = self.own_pair(j) else {
            return;
        };
        let mut p = self.blank_packet(PacketKind::Narp, j);
        p.dst_addr = requester.addr;
        p.dst_id = requester.id;
        p.target_id = Some(found.id);
        p.pairs = vec![requester, found, own];
        self.emit("NARP", j, format_args!("{} -> {}", found.id.0, requester.addr));
        self.start_lookup(PacketKind::Narp, j, p);
    }

    fn complete_resolve(&mut self, i: usize, pairs: &[IdAddressPair]) {
        let Some(target) = pairs.get(1).copied() else {
            return;
        };
        for p in pairs {
            if p.id != self.nodes[i].id {
                self.nodes[i].cache.learn(*p);
            }
        }
        let Some(pending) = self.nodes[i].pending.remove(&target.id) else {
            return;
        };
        self.metrics.record(MetricEvent::ResolveOk);
        if let Some(k) = pending.probe {
            self.probes[k].resolved = Some((self.now, target.addr));
        }
        for mut env in pending.queued {
            env.packet.dst_addr = target.addr;
            self.route(i, env);
        }
    }

    fn on_narq_timeout(&mut self, i: usize, epoch: u64, target: NodeId, attempt: u8) {
        if self.nodes[i].epoch != epoch {
            return;
        }
        match self.nodes[i].pending.get(&target) {
            Some(p) if p.attempt == attempt => {}
            _ => return,
        }
        if attempt < self.sc.narq_retries {
            return self.send_narq(i, target, attempt + 1);
        }
        let pending = self.nodes[i].pending.remove(&target).expect("checked");
        self.metrics.record(MetricEvent::ResolveFailed);
        if let Some(k) = pending.probe {
            self.probes[k].failed = true;
        }
        for env in pending.queued {
            self.drop_packet(env, DropReason::Unresolved);
        }
    }

    /// Resolve `target` from node `src` through the DHT, bypassing the
    /// requester's own cache. Returns the probe index.
    pub fn probe_resolve(&mut self, src: usize, target: NodeId) -> usize {
        self.probes.push(Probe {
            src,
            target,
            started: self.now,
            resolved: None,
            failed: false,
        });
        let k = self.probes.len() - 1;
        if self.nodes[src].table.is_none() {
            self.probes[k].failed = true;
            return k;
        }
        let fresh = !self.nodes[src].pending.contains_key(&target);
        self.nodes[src].pending.entry(target).or_default().probe = Some(k);
        if fresh {
            self.send_narq(src, target, 0);
        }
        k
    }

    // ---- end of run ----

    fn in_flight(&self) -> u64 {
        let queued: usize = self
            .queue
            .iter()
            .filter(|e| match e {
                Event::Arrive { env, .. } | Event::AckTimeout { env, .. } => env.packet.kind == PacketKind::Data,
                _ => false,
            })
            .count();
        let pending: usize = self
            .nodes
            .iter()
            .flat_map(|n| n.pending.values())
            .map(|p| p.queued.len())
            .sum();
        (queued + pending) as u64
    }

    pub fn final_addresses(&self) -> Vec<Option<NetAddress>> {
        self.nodes.iter().map(Node::addr).collect()
    }

    pub fn finish(mut self) -> RunOutput {
        self.run_until(self.sc.duration);
        let addresses = self.final_addresses();
        let mut counts: BTreeMap<NetAddress, usize> = BTreeMap::new();
        for a in addresses.iter().flatten() {
            *counts.entry(*a).or_default() += 1;
        }
        let duplicates = counts.values().filter(|c| **c > 1).map(|c| c - 1).sum();
        let trace_hash = self.hasher.take().map(|h| hex::encode(h.finalize()));
        let ctx = RunContext {
            key: RunKey {
                scenario_hash: self.sc.content_hash(),
                seed: self.sc.seed,
                mode: self.sc.mode.to_string(),
            },
            selection: self.sc.selection.to_string(),
            lookup: self.sc.lookup.to_string(),
            node_count: self.sc.nodes,
            duration: self.sc.duration,
            in_flight: self.in_flight(),
            unaddressed_at_end: addresses.iter().filter(|a| a.is_none()).count(),
            duplicate_addresses_at_end: duplicates,
            trace_hash: trace_hash.clone(),
        };
        RunOutput {
            metrics: finalize(&self.metrics, ctx),
            final_adjacency: self.adjacency(),
            final_addresses: addresses,
            ids: self.nodes.iter().map(|n| n.id).collect(),
            deliveries: self.deliveries,
            drops: self.drops,
            trace_hash,
            trace: self.trace,
        }
    }
}

/// Build and run a scenario to completion.
pub fn run(sc: Scenario, opts: SimOptions) -> Result<RunOutput, ScenarioError> {
    Ok(Simulator::new(sc, opts)?.finish())
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("now", &to_secs(self.now))
            .field("nodes", &self.nodes.len())
            .field("pending_events", &self.queue.len())
            .finish()
    }
}
