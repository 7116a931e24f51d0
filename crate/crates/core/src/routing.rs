//! Path discovery: per-node routing tables fed by neighbours' hello packets.
//!
//! A table keeps, for every sibling level of its owner, the next hops known
//! to reach that sibling. In ATR mode every neighbour offering a loop-free
//! route is kept (one entry per `(level, next_hop)`); in DART mode only the
//! single cheapest entry per level survives.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::addressing::{sibling_level, Level, NetAddress, NodeId, SiblingRef};
use crate::lookup::IdAddressPair;
use crate::time::Micros;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Multi-path augmented tree.
    Atr,
    /// Single entry per sibling: lowest NID, then lowest cost.
    Dart,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Atr => "atr",
            Mode::Dart => "dart",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "atr" => Ok(Mode::Atr),
            "dart" => Ok(Mode::Dart),
            _ => Err(format!("unknown mode {s:?} (expected atr or dart)")),
        }
    }
}

/// Set of addresses a route advertisement has traversed, kept sorted.
///
/// Capacity equals the address width; a receiver never stores a log grown past it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct RouteLog(Vec<NetAddress>);

impl RouteLog {
    pub fn single(a: NetAddress) -> Self {
        RouteLog(vec![a])
    }

    pub fn from_addrs(addrs: impl IntoIterator<Item = NetAddress>) -> Self {
        let mut v: Vec<_> = addrs.into_iter().collect();
        v.sort();
        v.dedup();
        RouteLog(v)
    }

    pub fn contains(&self, a: NetAddress) -> bool {
        self.0.binary_search(&a).is_ok()
    }

    pub fn with(&self, a: NetAddress) -> Self {
        let mut v = self.0.clone();
        if let Err(pos) = v.binary_search(&a) {
            v.insert(pos, a);
        }
        RouteLog(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = NetAddress> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for RouteLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteEntry {
    pub level: Level,
    pub next_hop: NetAddress,
    /// Lowest identifier known in the destination sibling.
    pub nid: NodeId,
    /// Hop count.
    pub cost: u16,
    pub route_log: RouteLog,
    pub refreshed_at: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelloRow {
    pub level: Level,
    pub sibling: SiblingRef,
    pub nid: NodeId,
    pub cost: u16,
    pub route_log: RouteLog,
}

/// Locally broadcast routing update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelloPacket {
    pub sender_addr: NetAddress,
    pub sender_id: NodeId,
    pub rows: Vec<HelloRow>,
    pub piggyback: Vec<IdAddressPair>,
}

impl HelloPacket {
    /// Lowest identifier the sender knows anywhere, itself included.
    pub fn network_nid(&self) -> NodeId {
        self.rows.iter().map(|r| r.nid).fold(self.sender_id, NodeId::min)
    }

    pub fn row(&self, level: Level) -> Option<&HelloRow> {
        self.rows.iter().find(|r| r.level == level)
    }

    /// Highest level for which the sender advertises no route.
    pub fn highest_free_level(&self) -> Option<Level> {
        let width = self.sender_addr.width();
        (0..width).rev().find(|k| self.row(*k).is_none())
    }

    /// Byte length of the serialized packet, piggyback section included.
    pub fn wire_len(&self) -> usize {
        let w = NetAddress::wire_len(self.sender_addr.width());
        HELLO_HEADER_FIXED + w + self.routing_rows_len() + self.piggyback_len()
    }

    /// Bytes spent on routing rows alone.
    pub fn routing_rows_len(&self) -> usize {
        let w = NetAddress::wire_len(self.sender_addr.width());
        self.rows.iter().map(|r| HELLO_ROW_FIXED + w * r.route_log.len()).sum()
    }

    /// Bytes of the piggyback section (count byte plus pairs).
    pub fn piggyback_len(&self) -> usize {
        1 + self.piggyback.len() * IdAddressPair::wire_len(self.sender_addr.width())
    }

    /// Serialize with the documented layout.
    ///
    /// ```text
    /// header : sender addr (ceil(l/8) B) | sender id (4 B, BE) | row count (1 B)
    /// row    : level (1 B) | nid (4 B) | cost (2 B) | log len (1 B) | log addrs
    /// trailer: pair count (1 B) | pairs (id 4 B + addr ceil(l/8) B each)
    /// ```
    pub fn encode(&self) -> Vec<u8> {
        let width = self.sender_addr.width();
        let mut out = Vec::with_capacity(self.wire_len());
        put_addr(&mut out, self.sender_addr);
        out.extend_from_slice(&self.sender_id.0.to_be_bytes());
        out.push(self.rows.len() as u8);
        for r in &self.rows {
            out.push(r.level);
            out.extend_from_slice(&r.nid.0.to_be_bytes());
            out.extend_from_slice(&r.cost.to_be_bytes());
            out.push(r.route_log.len() as u8);
            for a in r.route_log.iter() {
                put_addr(&mut out, a);
            }
        }
        out.push(self.piggyback.len() as u8);
        for p in &self.piggyback {
            out.extend_from_slice(&p.id.0.to_be_bytes());
            put_addr(&mut out, p.addr);
        }
        debug_assert_eq!(
            out.len(),
            HELLO_HEADER_FIXED + NetAddress::wire_len(width) + self.routing_rows_len() + self.piggyback_len()
        );
        out
    }

    /// Inverse of [`HelloPacket::encode`]. Piggybacked pairs come back with
    /// `learned_at = now`. Rows with a level outside the address width are
    /// kept; the receiver ignores them.
    pub fn decode(bytes: &[u8], width: u8, now: Micros) -> Option<HelloPacket> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let sender_addr = cur.addr(width)?;
        let sender_id = NodeId(cur.u32()?);
        let nrows = cur.u8()?;
        let mut rows = Vec::with_capacity(nrows as usize);
        for _ in 0..nrows {
            let level = cur.u8()?;
            let nid = NodeId(cur.u32()?);
            let cost = cur.u16()?;
            let len = cur.u8()?;
            let mut log = Vec::with_capacity(len as usize);
            for _ in 0..len {
                log.push(cur.addr(width)?);
            }
            let sibling = if level < width {
                sender_addr.sibling(level).ok()?
            } else {
                // Malformed level: keep a placeholder so the receiver can count it.
                sender_addr.sibling(0).ok()?
            };
            rows.push(HelloRow {
                level,
                sibling,
                nid,
                cost,
                route_log: RouteLog::from_addrs(log),
            });
        }
        let npairs = cur.u8()?;
        let mut piggyback = Vec::with_capacity(npairs as usize);
        for _ in 0..npairs {
            let id = NodeId(cur.u32()?);
            let addr = cur.addr(width)?;
            piggyback.push(IdAddressPair {
                id,
                addr,
                learned_at: now,
            });
        }
        (cur.pos == bytes.len()).then_some(HelloPacket {
            sender_addr,
            sender_id,
            rows,
            piggyback,
        })
    }

    /// Tabular rendering in the `level sibling NID cost routeLog` layout.
    pub fn render(&self) -> String {
        let mut s = String::from("level\tsibling\tNID\tcost\trouteLog\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.level, r.sibling, r.nid, r.cost, r.route_log);
        }
        s
    }
}

/// Sender address excluded: `id (4) + row count (1)`.
pub const HELLO_HEADER_FIXED: usize = 5;
/// Per row without the log addresses: `level (1) + nid (4) + cost (2) + log len (1)`.
pub const HELLO_ROW_FIXED: usize = 8;

fn put_addr(out: &mut Vec<u8>, a: NetAddress) {
    let n = NetAddress::wire_len(a.width());
    let be = a.bits().to_be_bytes();
    out.extend_from_slice(&be[4 - n..]);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn addr(&mut self, width: u8) -> Option<NetAddress> {
        let n = NetAddress::wire_len(width);
        let b = self.take(n)?;
        let bits = b.iter().fold(0u32, |acc, x| (acc << 8) | u32::from(*x));
        NetAddress::new(bits, width).ok()
    }
}

/// What a neighbour last told us about itself and about our own subtree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborInfo {
    /// Identifier carried by the latest hello from this address.
    pub id: NodeId,
    /// Every identifier recently heard from this address, sorted by id.
    /// More than one means the address is duplicated.
    pub ids: Vec<HeardId>,
    /// Sibling level of the neighbour relative to the owner.
    pub level: Level,
    pub heard_at: Micros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeardId {
    pub id: NodeId,
    pub at: Micros,
    /// NID this sender advertises for the sibling that contains the owner.
    pub claim: Option<NodeId>,
    /// Lowest id in this sender's own sibling: its id and its rows below
    /// the neighbour level.
    pub direct_nid: NodeId,
}

impl NeighborInfo {
    /// Lowest claim made by any holder of this address. Duplicated
    /// neighbours cannot mask each other's claims.
    pub fn claim(&self) -> Option<NodeId> {
        self.ids.iter().filter_map(|h| h.claim).min()
    }
}

/// Outcome of ingesting one hello.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateReport {
    pub added: usize,
    pub refreshed: usize,
    pub withdrawn: usize,
    pub loops_rejected: usize,
    pub malformed_rows: usize,
    /// Set when the sender uses the receiver's own address under another id.
    pub duplicate_of: Option<NodeId>,
    /// `(level, nid)` the sender reports for the receiver's own subtree.
    pub claim: Option<(Level, NodeId)>,
}

#[derive(Clone, Debug)]
pub struct RoutingTable {
    owner_addr: NetAddress,
    owner_id: NodeId,
    mode: Mode,
    /// Per level, entries sorted by next hop.
    levels: Vec<Vec<RouteEntry>>,
    neighbors: BTreeMap<NetAddress, NeighborInfo>,
    max_age: Micros,
}

/// Default age after which silent state is discarded: three 1 s hello periods.
pub const DEFAULT_MAX_AGE: Micros = 3 * crate::time::MICROS_PER_SEC;

impl RoutingTable {
    pub fn new(owner_addr: NetAddress, owner_id: NodeId, mode: Mode) -> Self {
        RoutingTable {
            owner_addr,
            owner_id,
            mode,
            levels: vec![Vec::new(); owner_addr.width() as usize],
            neighbors: BTreeMap::new(),
            max_age: DEFAULT_MAX_AGE,
        }
    }

    /// Age beyond which neighbour identifiers stop counting towards NIDs.
    pub fn with_max_age(mut self, max_age: Micros) -> Self {
        self.max_age = max_age;
        self
    }

    pub fn owner_addr(&self) -> NetAddress {
        self.owner_addr
    }

    pub fn owner_id(&self) -> NodeId {
        self.owner_id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn width(&self) -> u8 {
        self.owner_addr.width()
    }

    pub fn entries(&self, level: Level) -> &[RouteEntry] {
        &self.levels[level as usize]
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &RouteEntry> {
        self.levels.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self) -> &BTreeMap<NetAddress, NeighborInfo> {
        &self.neighbors
    }

    /// Distinct next hops across all levels.
    pub fn next_hops(&self) -> Vec<NetAddress> {
        let mut v: Vec<_> = self.all_entries().map(|e| e.next_hop).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Entries whose route log can still grow by one hop.
    fn live(&self, level: Level) -> impl Iterator<Item = &RouteEntry> {
        let cap = self.width() as usize;
        self.levels[level as usize]
            .iter()
            .filter(move |e| e.route_log.len() < cap)
    }

    /// Cheapest entry for `level` with room left in its route log; ties go
    /// to the lowest next hop.
    pub fn best(&self, level: Level) -> Option<&RouteEntry> {
        self.live(level).min_by_key(|e| (e.cost, e.next_hop))
    }

    /// Entry advertised for `level`: the lowest NID, then the lowest cost,
    /// then the lowest next hop. The advertised route log is the path that
    /// supplied the NID, so a NID can never be echoed back to its source.
    /// Full logs are advertised too: no receiver can extend them, but the
    /// NID still reaches conflict detection.
    pub fn advertised(&self, level: Level) -> Option<&RouteEntry> {
        self.levels[level as usize]
            .iter()
            .min_by_key(|e| (e.nid, e.cost, e.next_hop))
    }

    /// NID of the owner's own level-k subtree: the owner plus all siblings below k.
    pub fn subtree_nid(&self, level: Level) -> NodeId {
        (0..level)
            .flat_map(|k| self.live(k))
            .map(|e| e.nid)
            .fold(self.owner_id, NodeId::min)
    }

    /// Lowest identifier known anywhere in the network.
    pub fn network_nid(&self) -> NodeId {
        self.subtree_nid(self.width())
    }

    pub fn build_hello(&self) -> HelloPacket {
        let mut rows = Vec::new();
        for k in 0..self.width() {
            let Some(e) = self.advertised(k) else {
                continue;
            };
            rows.push(HelloRow {
                level: k,
                sibling: self.owner_addr.sibling(k).expect("level < width"),
                nid: e.nid,
                cost: e.cost,
                route_log: e.route_log.clone(),
            });
        }
        HelloPacket {
            sender_addr: self.owner_addr,
            sender_id: self.owner_id,
            rows,
            piggyback: Vec::new(),
        }
    }

    pub fn process_hello(&mut self, hello: &HelloPacket, now: Micros) -> UpdateReport {
        let mut report = UpdateReport::default();
        let width = self.width();
        if hello.sender_addr.width() != width {
            report.malformed_rows = hello.rows.len();
            return report;
        }
        if hello.sender_addr == self.owner_addr {
            if hello.sender_id != self.owner_id {
                report.duplicate_of = Some(hello.sender_id);
            }
            return report;
        }
        let sl = sibling_level(self.owner_addr, hello.sender_addr).expect("distinct addresses");

        // A known neighbour id reappearing under a new address: drop the old routes.
        let stale: Vec<NetAddress> = self
            .neighbors
            .iter()
            .filter(|(a, n)| **a != hello.sender_addr && n.ids.iter().any(|h| h.id == hello.sender_id))
            .map(|(a, _)| *a)
            .collect();
        for a in stale {
            report.withdrawn += self.drop_next_hop(a);
        }

        let claim = hello.row(sl).map(|r| r.nid);
        report.claim = claim.map(|n| (sl, n));
        let direct_nid = hello
            .rows
            .iter()
            .filter(|r| r.level < sl)
            .map(|r| r.nid)
            .fold(hello.sender_id, NodeId::min);
        let max_age = self.max_age;
        let info = self.neighbors.entry(hello.sender_addr).or_insert_with(|| NeighborInfo {
            id: hello.sender_id,
            ids: Vec::new(),
            level: sl,
            heard_at: now,
        });
        info.ids
            .retain(|h| h.id != hello.sender_id && now.saturating_sub(h.at) <= max_age);
        info.ids.push(HeardId {
            id: hello.sender_id,
            at: now,
            claim,
            direct_nid,
        });
        info.ids.sort_by_key(|h| h.id);
        info.id = hello.sender_id;
        info.level = sl;
        info.heard_at = now;
        // Holders of a duplicated address must not overwrite each other's NID.
        let direct_nid = info
            .ids
            .iter()
            .map(|h| h.direct_nid)
            .min()
            .expect("sender just recorded");
        self.upsert(
            RouteEntry {
                level: sl,
                next_hop: hello.sender_addr,
                nid: direct_nid,
                cost: 1,
                route_log: RouteLog::single(hello.sender_addr),
                refreshed_at: now,
            },
            &mut report,
        );

        let cap = width as usize;
        let mut offered = vec![false; width as usize];
        offered[sl as usize] = true;
        for row in &hello.rows {
            if row.level >= width {
                report.malformed_rows += 1;
                continue;
            }
            if row.level <= sl {
                continue;
            }
            if row.route_log.contains(self.owner_addr) {
                report.loops_rejected += 1;
                continue;
            }
            let route_log = row.route_log.with(hello.sender_addr);
            if route_log.len() > cap {
                continue;
            }
            offered[row.level as usize] = true;
            self.upsert(
                RouteEntry {
                    level: row.level,
                    next_hop: hello.sender_addr,
                    nid: row.nid,
                    cost: row.cost.saturating_add(1),
                    route_log,
                    refreshed_at: now,
                },
                &mut report,
            );
        }

        // Hellos carry the full reachability state: a level no longer offered
        // withdraws the routes through this sender.
        for (k, entries) in self.levels.iter_mut().enumerate() {
            if offered[k] {
                continue;
            }
            let before = entries.len();
            entries.retain(|e| e.next_hop != hello.sender_addr);
            report.withdrawn += before - entries.len();
        }
        report
    }

    fn upsert(&mut self, cand: RouteEntry, report: &mut UpdateReport) {
        let entries = &mut self.levels[cand.level as usize];
        match self.mode {
            Mode::Atr => match entries.binary_search_by_key(&cand.next_hop, |e| e.next_hop) {
                Ok(i) => {
                    entries[i] = cand;
                    report.refreshed += 1;
                }
                Err(i) => {
                    entries.insert(i, cand);
                    report.added += 1;
                }
            },
            Mode::Dart => match entries.first() {
                None => {
                    entries.push(cand);
                    report.added += 1;
                }
                Some(cur) if cur.next_hop == cand.next_hop => {
                    entries[0] = cand;
                    report.refreshed += 1;
                }
                // Same order as the advertised entry, so both modes send
                // identical hellos for identical inputs.
                Some(cur) if (cand.nid, cand.cost) < (cur.nid, cur.cost) => {
                    entries[0] = cand;
                    report.added += 1;
                }
                Some(_) => {}
            },
        }
    }

    fn drop_next_hop(&mut self, hop: NetAddress) -> usize {
        self.neighbors.remove(&hop);
        let mut n = 0;
        for entries in &mut self.levels {
            let before = entries.len();
            entries.retain(|e| e.next_hop != hop);
            n += before - entries.len();
        }
        n
    }

    /// Remove entries and neighbours not refreshed for longer than `max_age`.
    /// A silent neighbour loses every entry that uses it as next hop.
    pub fn expire(&mut self, now: Micros, max_age: Micros) -> Vec<RouteEntry> {
        let silent: Vec<NetAddress> = self
            .neighbors
            .iter()
            .filter(|(_, n)| now.saturating_sub(n.heard_at) > max_age)
            .map(|(a, _)| *a)
            .collect();
        for a in &silent {
            self.neighbors.remove(a);
        }
        for n in self.neighbors.values_mut() {
            n.ids.retain(|h| now.saturating_sub(h.at) <= max_age);
        }
        let mut removed = Vec::new();
        for entries in &mut self.levels {
            let mut i = 0;
            while i < entries.len() {
                let e = &entries[i];
                if now.saturating_sub(e.refreshed_at) > max_age || silent.contains(&e.next_hop) {
                    removed.push(entries.remove(i));
                } else {
                    i += 1;
                }
            }
        }
        removed
    }

    /// Tabular rendering in the `level sibling nextHop ID cost` layout; the
    /// level and sibling columns are blank on continuation lines.
    pub fn render(&self) -> String {
        let mut s = String::from("level\tsibling\tnextHop\tID\tcost\n");
        for (k, entries) in self.levels.iter().enumerate() {
            for (i, e) in entries.iter().enumerate() {
                if i == 0 {
                    let sib = self.owner_addr.sibling(k as Level).expect("level < width");
                    let _ = write!(s, "{k}\t{sib}\t");
                } else {
                    s.push_str("\t\t");
                }
                let _ = writeln!(s, "{}\t{}\t{}", e.next_hop, e.nid, e.cost);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(s: &str) -> NetAddress {
        s.parse().unwrap()
    }

    fn hello(from: &str, id: u32, rows: &[(u8, u32, u16, &[&str])]) -> HelloPacket {
        let sender = a(from);
        HelloPacket {
            sender_addr: sender,
            sender_id: NodeId(id),
            rows: rows
                .iter()
                .map(|(k, nid, cost, log)| HelloRow {
                    level: *k,
                    sibling: sender.sibling(*k).unwrap(),
                    nid: NodeId(*nid),
                    cost: *cost,
                    route_log: RouteLog::from_addrs(log.iter().map(|s| a(s))),
                })
                .collect(),
            piggyback: vec![],
        }
    }

    #[test]
    fn isolated_node_sends_empty_hello() {
        let t = RoutingTable::new(a("000"), NodeId(1), Mode::Atr);
        let h = t.build_hello();
        assert!(h.rows.is_empty());
        assert_eq!(h.wire_len(), 1 + 4 + 1 + 1);
    }

    #[test]
    fn neighbour_becomes_forwarder_for_higher_siblings() {
        // Node 001 hears 000 advertising [01X] and [1XX] at cost 1.
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        let h = hello(
            "000",
            1,
            &[(0, 4, 1, &["001"]), (1, 3, 1, &["010"]), (2, 2, 1, &["100"])],
        );
        let r = t.process_hello(&h, 0);
        assert_eq!(r.added, 3);
        assert_eq!(r.claim, Some((0, NodeId(4))));
        assert_eq!(t.entries(0)[0].cost, 1);
        assert_eq!(t.entries(1)[0].cost, 2);
        assert_eq!(t.entries(2)[0].cost, 2);
        assert_eq!(t.entries(2)[0].route_log, RouteLog::from_addrs([a("000"), a("100")]));
    }

    #[test]
    fn advertisement_is_min_over_entries() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("000", 1, &[(2, 2, 1, &["100"])]), 0);
        t.process_hello(&hello("100", 2, &[]), 0);
        let h = t.build_hello();
        let row = h.row(2).unwrap();
        assert_eq!(row.cost, 1);
        assert_eq!(row.route_log, RouteLog::single(a("100")));
        assert_eq!(t.entries(2).len(), 2);
    }

    #[test]
    fn rows_through_the_receiver_are_discarded() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        let r = t.process_hello(&hello("000", 1, &[(2, 2, 2, &["001", "100"])]), 0);
        assert_eq!(r.loops_rejected, 1);
        assert!(t.entries(2).is_empty());
        assert!(t.all_entries().all(|e| !e.route_log.contains(a("001"))));
    }

    #[test]
    fn dart_keeps_only_a_better_entry() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Dart);
        t.process_hello(&hello("000", 1, &[(2, 2, 1, &["100"])]), 0);
        t.process_hello(&hello("010", 3, &[(2, 2, 1, &["100"])]), 0);
        assert_eq!(t.entries(2).len(), 1);
        assert_eq!(t.entries(2)[0].next_hop, a("000"));
        t.process_hello(&hello("100", 2, &[]), 0);
        assert_eq!(t.entries(2)[0].next_hop, a("100"));
        assert_eq!(t.entries(2)[0].cost, 1);
    }

    #[test]
    fn dart_prefers_a_lower_nid_over_a_cheaper_route() {
        let mut t = RoutingTable::new(a("001"), NodeId(9), Mode::Dart);
        t.process_hello(&hello("000", 8, &[(2, 5, 1, &["100"])]), 0);
        t.process_hello(&hello("010", 7, &[(2, 2, 2, &["100"])]), 0);
        assert_eq!(t.entries(2).len(), 1);
        assert_eq!((t.entries(2)[0].next_hop, t.entries(2)[0].nid), (a("010"), NodeId(2)));
        assert_eq!(t.build_hello().row(2).unwrap().nid, NodeId(2));
    }

    #[test]
    fn missing_row_withdraws_route() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("000", 1, &[(2, 2, 1, &["100"])]), 0);
        assert_eq!(t.entries(2).len(), 1);
        let r = t.process_hello(&hello("000", 1, &[]), 10);
        assert_eq!(r.withdrawn, 1);
        assert!(t.entries(2).is_empty());
        assert_eq!(t.entries(0).len(), 1);
    }

    #[test]
    fn expiry_uses_strict_inequality() {
        let sec = 1_000_000;
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("000", 1, &[]), 10 * sec);
        assert!(t.expire(13 * sec, 3 * sec).is_empty());
        assert_eq!(t.len(), 1);
        let gone = t.expire(13 * sec + sec / 2, 3 * sec);
        assert_eq!(gone.len(), 1);
        assert!(t.is_empty());
        assert!(t.neighbors().is_empty());
    }

    #[test]
    fn readdressed_neighbour_loses_old_routes() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("000", 1, &[(2, 2, 1, &["100"])]), 0);
        let r = t.process_hello(&hello("010", 1, &[]), 5);
        assert_eq!(r.withdrawn, 2);
        assert_eq!(t.next_hops(), vec![a("010")]);
    }

    #[test]
    fn same_address_other_id_is_flagged() {
        let mut t = RoutingTable::new(a("011"), NodeId(5), Mode::Atr);
        let r = t.process_hello(&hello("011", 9, &[]), 0);
        assert_eq!(r.duplicate_of, Some(NodeId(9)));
        assert!(t.is_empty());
    }

    #[test]
    fn duplicated_neighbour_address_reports_lowest_id() {
        let mut t = RoutingTable::new(a("010"), NodeId(1), Mode::Atr);
        t.process_hello(&hello("011", 9, &[]), 0);
        t.process_hello(&hello("011", 5, &[]), 10);
        t.process_hello(&hello("011", 9, &[]), 20);
        assert_eq!(t.entries(0).len(), 1);
        assert_eq!(t.build_hello().row(0).unwrap().nid, NodeId(5));
        // Id 5 falls silent and ages out.
        t.process_hello(&hello("011", 9, &[]), 20 + DEFAULT_MAX_AGE + 1);
        assert_eq!(t.build_hello().row(0).unwrap().nid, NodeId(9));
    }

    #[test]
    fn malformed_levels_are_counted() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        let mut h = hello("000", 1, &[(2, 2, 1, &["100"])]);
        h.rows[0].level = 7;
        let r = t.process_hello(&h, 0);
        assert_eq!(r.malformed_rows, 1);
    }

    #[test]
    fn full_logs_are_advertised_but_never_extended() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("000", 1, &[(2, 2, 2, &["010", "100"])]), 0);
        assert_eq!(t.entries(2)[0].route_log.len(), 3);
        let h = t.build_hello();
        assert_eq!(h.row(2).map(|r| r.nid), Some(NodeId(2)));
        let mut next = RoutingTable::new(a("011"), NodeId(6), Mode::Atr);
        next.process_hello(&h, 0);
        assert!(next.entries(2).is_empty());
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut h = hello("000", 1, &[(0, 4, 1, &["001"]), (2, 2, 3, &["100", "110"])]);
        h.piggyback.push(IdAddressPair {
            id: NodeId(7),
            addr: a("101"),
            learned_at: 42,
        });
        let bytes = h.encode();
        assert_eq!(bytes.len(), h.wire_len());
        assert_eq!(HelloPacket::decode(&bytes, 3, 42).unwrap(), h);
        assert!(HelloPacket::decode(&bytes[..bytes.len() - 1], 3, 42).is_none());
    }

    const W: u8 = 5;

    fn arb_hello() -> impl Strategy<Value = HelloPacket> {
        let row = (0u8..W, 1u32..40, 1u16..6, proptest::collection::vec(0u32..32, 0..4));
        (0u32..32, 1u32..40, proptest::collection::vec(row, 0..6)).prop_map(|(from, id, rows)| {
            let sender = NetAddress::new(from, W).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            let rows = rows
                .into_iter()
                .filter(|(k, ..)| seen.insert(*k))
                .map(|(k, nid, cost, log)| HelloRow {
                    level: k,
                    sibling: sender.sibling(k).unwrap(),
                    nid: NodeId(nid),
                    cost,
                    route_log: RouteLog::from_addrs(log.into_iter().map(|b| NetAddress::new(b, W).unwrap())),
                })
                .collect();
            HelloPacket {
                sender_addr: sender,
                sender_id: NodeId(id),
                rows,
                piggyback: Vec::new(),
            }
        })
    }

    proptest! {
        #[test]
        fn tables_never_route_through_their_owner(
            owner in 0u32..32,
            hellos in proptest::collection::vec(arb_hello(), 1..12),
        ) {
            let own = NetAddress::new(owner, W).unwrap();
            for mode in [Mode::Atr, Mode::Dart] {
                let mut t = RoutingTable::new(own, NodeId(100), mode);
                for (i, h) in hellos.iter().enumerate() {
                    t.process_hello(h, i as Micros);
                }
                prop_assert!(t.all_entries().all(|e| !e.route_log.contains(own)));
                for k in 0..W {
                    let hops: Vec<_> = t.entries(k).iter().map(|e| e.next_hop).collect();
                    let distinct: std::collections::BTreeSet<_> = hops.iter().collect();
                    prop_assert_eq!(distinct.len(), hops.len());
                    if mode == Mode::Dart {
                        prop_assert!(hops.len() <= 1);
                    }
                    prop_assert!(t.entries(k).iter().all(|e| sibling_level(own, e.next_hop).unwrap() <= k));
                }
                let out = t.build_hello();
                prop_assert!(out.rows.iter().all(|r| r.route_log.len() < W as usize));
            }
        }

        #[test]
        fn hello_encoding_round_trips(h in arb_hello()) {
            let bytes = h.encode();
            prop_assert_eq!(bytes.len(), h.wire_len());
            prop_assert_eq!(HelloPacket::decode(&bytes, W, 0).unwrap(), h);
        }
    }
}
