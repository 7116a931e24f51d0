//! Run metrics: delivery, stretch, overhead, table size, allocation
//! convergence and address churn, written as one CSV row per run.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use crate::addressing::NetAddress;
use crate::forwarding::{DropReason, PacketKind};
use crate::time::{to_secs, Micros};

/// Hop distance between `src` and `dst` in an adjacency-list snapshot,
/// `None` when disconnected.
pub fn bfs_oracle(adj: &[Vec<usize>], src: usize, dst: usize) -> Option<u32> {
    bfs_distances(adj, src)[dst]
}

/// Hop distances from `src` to every node.
pub fn bfs_distances(adj: &[Vec<usize>], src: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricEvent {
    DataSent,
    /// `shortest` is the BFS distance at send time.
    DataDelivered {
        hops: u8,
        shortest: Option<u32>,
    },
    DataDropped(DropReason),
    Hello {
        bytes: usize,
        routing_bytes: usize,
    },
    Control {
        kind: PacketKind,
        bytes: usize,
    },
    /// Mean routing entries per addressed node at one sampling instant.
    TableSample {
        mean_entries: f64,
    },
    AddressAcquired {
        previous: Option<NetAddress>,
        new: NetAddress,
    },
    Duplicate {
        at: Micros,
    },
    Invalid {
        at: Micros,
    },
    MalformedRows(usize),
    ResolveOk,
    ResolveFailed,
}

#[derive(Clone, Debug, Default)]
pub struct Collector {
    pub sent: u64,
    pub delivered: u64,
    pub drops: BTreeMap<DropReason, u64>,
    hop_sum: u64,
    stretch_sum: f64,
    stretch_n: u64,
    pub hello_packets: u64,
    pub hello_bytes: u64,
    pub hello_routing_bytes: u64,
    pub control_packets: u64,
    pub control_bytes: u64,
    table_sum: f64,
    table_n: u64,
    pub addr_changes: u64,
    changed_bits_sum: u64,
    pub last_duplicate: Option<Micros>,
    pub last_invalid: Option<Micros>,
    pub duplicate_events: u64,
    pub invalid_events: u64,
    pub malformed_rows: u64,
    pub resolve_ok: u64,
    pub resolve_failed: u64,
}

impl Collector {
    pub fn record(&mut self, ev: MetricEvent) {
        match ev {
            MetricEvent::DataSent => self.sent += 1,
            MetricEvent::DataDelivered { hops, shortest } => {
                self.delivered += 1;
                self.hop_sum += u64::from(hops);
                if let Some(d) = shortest.filter(|d| *d > 0) {
                    self.stretch_sum += f64::from(hops) / f64::from(d);
                    self.stretch_n += 1;
                }
            }
            MetricEvent::DataDropped(r) => *self.drops.entry(r).or_default() += 1,
            MetricEvent::Hello { bytes, routing_bytes } => {
                self.hello_packets += 1;
                self.hello_bytes += bytes as u64;
                self.hello_routing_bytes += routing_bytes as u64;
            }
            MetricEvent::Control { bytes, .. } => {
                self.control_packets += 1;
                self.control_bytes += bytes as u64;
            }
            MetricEvent::TableSample { mean_entries } => {
                self.table_sum += mean_entries;
                self.table_n += 1;
            }
            MetricEvent::AddressAcquired { previous, new } => {
                if let Some(p) = previous {
                    if p != new {
                        self.addr_changes += 1;
                        self.changed_bits_sum += u64::from(p.changed_bits(new));
                    }
                }
            }
            MetricEvent::Duplicate { at } => {
                self.duplicate_events += 1;
                self.last_duplicate = self.last_duplicate.max(Some(at));
            }
            MetricEvent::Invalid { at } => {
                self.invalid_events += 1;
                self.last_invalid = self.last_invalid.max(Some(at));
            }
            MetricEvent::MalformedRows(n) => self.malformed_rows += n as u64,
            MetricEvent::ResolveOk => self.resolve_ok += 1,
            MetricEvent::ResolveFailed => self.resolve_failed += 1,
        }
    }

    pub fn dropped(&self) -> u64 {
        self.drops.values().sum()
    }
}

/// Identity of a run in result files.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub scenario_hash: String,
    pub seed: u64,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub key: RunKey,
    pub selection: String,
    pub lookup: String,
    pub node_count: usize,
    pub duration_s: f64,
    pub sent: u64,
    pub delivered: u64,
    pub in_flight: u64,
    pub drops: BTreeMap<DropReason, u64>,
    pub pdr: f64,
    pub mean_hops: f64,
    pub stretch: f64,
    pub hello_packets: u64,
    pub hello_bytes: u64,
    pub hello_routing_bytes: u64,
    pub control_packets: u64,
    pub control_bytes: u64,
    pub overhead_packets: u64,
    pub overhead_bytes: u64,
    pub mean_table_entries: f64,
    pub alloc_last_duplicate: Option<f64>,
    pub alloc_last_invalid: Option<f64>,
    pub duplicate_events: u64,
    pub invalid_events: u64,
    pub addr_changes: u64,
    pub addr_update_rate: f64,
    pub mean_changed_bits: f64,
    pub unaddressed_at_end: usize,
    pub duplicate_addresses_at_end: usize,
    pub resolve_ok: u64,
    pub resolve_failed: u64,
    pub malformed_rows: u64,
    pub trace_hash: Option<String>,
}

/// Context not visible to the collector itself.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub key: RunKey,
    pub selection: String,
    pub lookup: String,
    pub node_count: usize,
    pub duration: Micros,
    pub in_flight: u64,
    pub unaddressed_at_end: usize,
    pub duplicate_addresses_at_end: usize,
    pub trace_hash: Option<String>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn finalize(c: &Collector, ctx: RunContext) -> RunMetrics {
    let duration_s = to_secs(ctx.duration);
    RunMetrics {
        key: ctx.key,
        selection: ctx.selection,
        lookup: ctx.lookup,
        node_count: ctx.node_count,
        duration_s,
        sent: c.sent,
        delivered: c.delivered,
        in_flight: ctx.in_flight,
        drops: c.drops.clone(),
        pdr: ratio(c.delivered as f64, c.sent as f64),
        mean_hops: ratio(c.hop_sum as f64, c.delivered as f64),
        stretch: ratio(c.stretch_sum, c.stretch_n as f64),
        hello_packets: c.hello_packets,
        hello_bytes: c.hello_bytes,
        hello_routing_bytes: c.hello_routing_bytes,
        control_packets: c.control_packets,
        control_bytes: c.control_bytes,
        overhead_packets: c.hello_packets + c.control_packets,
        overhead_bytes: c.hello_bytes + c.control_bytes,
        mean_table_entries: ratio(c.table_sum, c.table_n as f64),
        alloc_last_duplicate: c.last_duplicate.map(to_secs),
        alloc_last_invalid: c.last_invalid.map(to_secs),
        duplicate_events: c.duplicate_events,
        invalid_events: c.invalid_events,
        addr_changes: c.addr_changes,
        addr_update_rate: ratio(c.addr_changes as f64, duration_s),
        mean_changed_bits: ratio(c.changed_bits_sum as f64, c.addr_changes as f64),
        unaddressed_at_end: ctx.unaddressed_at_end,
        duplicate_addresses_at_end: ctx.duplicate_addresses_at_end,
        resolve_ok: c.resolve_ok,
        resolve_failed: c.resolve_failed,
        malformed_rows: c.malformed_rows,
        trace_hash: ctx.trace_hash,
    }
}

pub const CSV_HEADER: &str = "scenario_hash,seed,mode,selection,lookup,node_count,duration_s,\
sent,delivered,in_flight,drop_ttl,drop_no_route,drop_failed,drop_unresolved,drop_misdelivered,drop_unaddressed,\
pdr,mean_hops,stretch,hello_packets,hello_bytes,hello_routing_bytes,control_packets,control_bytes,\
overhead_packets,overhead_bytes,mean_table_entries,alloc_last_duplicate,alloc_last_invalid,\
duplicate_events,invalid_events,addr_changes,addr_update_rate,mean_changed_bits,\
unaddressed_at_end,duplicate_addresses_at_end,resolve_ok,resolve_failed,malformed_rows,trace_hash";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunMetrics {
    pub fn drop_count(&self, r: DropReason) -> u64 {
        self.drops.get(&r).copied().unwrap_or(0)
    }

    pub fn dropped(&self) -> u64 {
        self.drops.values().sum()
    }

    /// Last allocation event (duplicate or invalid), if any.
    pub fn alloc_last_event(&self) -> Option<f64> {
        match (self.alloc_last_duplicate, self.alloc_last_invalid) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},",
            self.key.scenario_hash,
            self.key.seed,
            self.key.mode,
            self.selection,
            self.lookup,
            self.node_count,
            self.duration_s
        );
        let _ = write!(s, "{},{},{},", self.sent, self.delivered, self.in_flight);
        for r in DropReason::ALL {
            let _ = write!(s, "{},", self.drop_count(r));
        }
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},",
            self.pdr,
            self.mean_hops,
            self.stretch,
            self.hello_packets,
            self.hello_bytes,
            self.hello_routing_bytes,
            self.control_packets,
            self.control_bytes,
            self.overhead_packets,
            self.overhead_bytes,
            self.mean_table_entries,
            opt(self.alloc_last_duplicate),
            opt(self.alloc_last_invalid),
        );
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.duplicate_events,
            self.invalid_events,
            self.addr_changes,
            self.addr_update_rate,
            self.mean_changed_bits,
            self.unaddressed_at_end,
            self.duplicate_addresses_at_end,
            self.resolve_ok,
            self.resolve_failed,
            self.malformed_rows,
            self.trace_hash.as_deref().unwrap_or(""),
        );
        s
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let mut v = vec![];
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect()
    }

    #[test]
    fn bfs_on_simple_graphs() {
        let mesh: Vec<Vec<usize>> = (0..4).map(|i| (0..4).filter(|j| *j != i).collect()).collect();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(bfs_oracle(&mesh, i, j), Some(1));
                }
            }
        }
        assert_eq!(bfs_oracle(&line(5), 0, 4), Some(4));
        let split = vec![vec![1], vec![0], vec![]];
        assert_eq!(bfs_oracle(&split, 0, 2), None);
    }

    fn ctx() -> RunContext {
        RunContext {
            key: RunKey {
                scenario_hash: "abc".into(),
                seed: 1,
                mode: "atr".into(),
            },
            selection: "atr".into(),
            lookup: "oracle".into(),
            node_count: 4,
            duration: 100 * crate::time::MICROS_PER_SEC,
            in_flight: 0,
            unaddressed_at_end: 0,
            duplicate_addresses_at_end: 0,
            trace_hash: None,
        }
    }

    #[test]
    fn pdr_and_churn() {
        let mut c = Collector::default();
        for _ in 0..100 {
            c.record(MetricEvent::DataSent);
        }
        for _ in 0..87 {
            c.record(MetricEvent::DataDelivered {
                hops: 2,
                shortest: Some(1),
            });
        }
        let m = finalize(&c, ctx());
        assert!((m.pdr - 0.87).abs() < 1e-12);
        assert_eq!(m.addr_update_rate, 0.0);
        assert_eq!(m.stretch, 2.0);

        c.record(MetricEvent::AddressAcquired {
            previous: Some("000".parse().unwrap()),
            new: "110".parse().unwrap(),
        });
        let m = finalize(&c, ctx());
        assert_eq!(m.mean_changed_bits, 2.0);
        assert!((m.addr_update_rate - 0.01).abs() < 1e-12);
    }

    #[test]
    fn first_address_is_not_a_change() {
        let mut c = Collector::default();
        c.record(MetricEvent::AddressAcquired {
            previous: None,
            new: "000".parse().unwrap(),
        });
        assert_eq!(c.addr_changes, 0);
    }

    #[test]
    fn csv_row_matches_header() {
        let m = finalize(&Collector::default(), ctx());
        assert_eq!(m.csv_row().split(',').count(), CSV_HEADER.split(',').count());
        assert_eq!(m.csv_row(), finalize(&Collector::default(), ctx()).csv_row());
    }

    #[test]
    fn mean_and_sample_std() {
        let (mean, sd) = mean_std(&[2.0, 4.0]);
        assert_eq!(mean, 3.0);
        assert!((sd - 2f64.sqrt()).abs() < 1e-12);
    }
}
