//! Packet forwarding over the multi-path table.
//!
//! Each hop looks up the sibling level that contains the destination and
//! takes the cheapest usable entry there. Data packets may escalate to higher
//! levels when that sibling has no entry. Lookup packets instead walk towards
//! the node closest to their target address. A missing link-layer ack bars
//! the failed next hop for a while and the packet is re-forwarded over an
//! alternative already in the table (ATR mode only).

use std::fmt;

use crate::addressing::{sibling_level, Level, NetAddress, NodeId};
use crate::lookup::IdAddressPair;
use crate::routing::{Mode, RouteEntry, RoutingTable};
use crate::time::Micros;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketKind {
    Data,
    /// Network address update.
    Naup,
    /// Network address request.
    Narq,
    /// Network address reply.
    Narp,
}

impl PacketKind {
    /// Packets routed towards a hash target rather than an exact address.
    pub fn is_anchored(self) -> bool {
        matches!(self, PacketKind::Naup | PacketKind::Narq)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PacketKind::Data => "DATA",
            PacketKind::Naup => "NAUP",
            PacketKind::Narq => "NARQ",
            PacketKind::Narp => "NARP",
        }
    }
}

impl fmt::Display for PacketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPacket {
    pub kind: PacketKind,
    pub src_id: NodeId,
    pub dst_id: NodeId,
    pub src_addr: NetAddress,
    pub dst_addr: NetAddress,
    pub ttl: u8,
    pub hop_count: u8,
    pub payload_len: u32,
    pub seq: u64,
    /// Re-forward attempts made at the current hop.
    pub retries: u8,
    /// Identifier looked up by a NARQ.
    pub target_id: Option<NodeId>,
    /// Lookup pairs carried by NAUP/NARQ/NARP packets.
    pub pairs: Vec<IdAddressPair>,
}

impl DataPacket {
    /// Serialized length: data header plus payload, or the lookup layout.
    pub fn wire_len(&self) -> usize {
        let w = self.dst_addr.width();
        match self.kind {
            // kind, ttl, src/dst ids, src/dst addresses, seq
            PacketKind::Data => 2 + 8 + 2 * NetAddress::wire_len(w) + 4 + self.payload_len as usize,
            k => crate::lookup::control_wire_len(k, w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropReason {
    Ttl,
    NoRoute,
    Failed,
    /// Destination address could not be resolved.
    Unresolved,
    /// Reached the destination address, but another node holds it now.
    Misdelivered,
    /// Source or relay had no address when the packet was handled.
    Unaddressed,
}

impl DropReason {
    pub const ALL: [DropReason; 6] = [
        DropReason::Ttl,
        DropReason::NoRoute,
        DropReason::Failed,
        DropReason::Unresolved,
        DropReason::Misdelivered,
        DropReason::Unaddressed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Ttl => "ttl",
            DropReason::NoRoute => "no_route",
            DropReason::Failed => "failed",
            DropReason::Unresolved => "unresolved",
            DropReason::Misdelivered => "misdelivered",
            DropReason::Unaddressed => "unaddressed",
        }
    }
}

/// Temporarily barred `(level, next_hop)` pairs of one node.
#[derive(Clone, Debug, Default)]
pub struct InvalidationSet {
    barred: Vec<(Level, NetAddress, Micros)>,
}

impl InvalidationSet {
    pub fn bar(&mut self, level: Level, hop: NetAddress, until: Micros) {
        if let Some(b) = self.barred.iter_mut().find(|(l, h, _)| *l == level && *h == hop) {
            b.2 = b.2.max(until);
        } else {
            self.barred.push((level, hop, until));
        }
    }

    pub fn is_barred(&self, level: Level, hop: NetAddress, now: Micros) -> bool {
        self.barred
            .iter()
            .any(|(l, h, until)| *l == level && *h == hop && now < *until)
    }

    pub fn purge(&mut self, now: Micros) {
        self.barred.retain(|(_, _, until)| now < *until);
    }

    pub fn clear(&mut self) {
        self.barred.clear();
    }

    pub fn len(&self) -> usize {
        self.barred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.barred.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Deliver,
    NextHop {
        hop: NetAddress,
        level: Level,
    },
    /// No entry towards the target: this node holds the best prefix.
    Anchor,
    NoRoute,
}

fn cheapest<'a>(entries: &'a [RouteEntry], inval: &InvalidationSet, now: Micros) -> Option<&'a RouteEntry> {
    entries
        .iter()
        .filter(|e| !inval.is_barred(e.level, e.next_hop, now))
        .min_by_key(|e| (e.cost, e.next_hop))
}

pub fn select_next_hop(
    table: &RoutingTable,
    dst: NetAddress,
    kind: PacketKind,
    inval: &InvalidationSet,
    escalate: bool,
    now: Micros,
) -> Selection {
    let own = table.owner_addr();
    if dst == own {
        return Selection::Deliver;
    }
    let k = sibling_level(own, dst).expect("dst differs from own address");
    if let Some(e) = cheapest(table.entries(k), inval, now) {
        return Selection::NextHop {
            hop: e.next_hop,
            level: k,
        };
    }
    if escalate {
        for j in k + 1..table.width() {
            if let Some(e) = cheapest(table.entries(j), inval, now) {
                return Selection::NextHop {
                    hop: e.next_hop,
                    level: j,
                };
            }
        }
    }
    if kind.is_anchored() {
        Selection::Anchor
    } else {
        Selection::NoRoute
    }
}

/// Next hop for a lookup packet heading to `target`, or `None` if this node
/// is the closest populated address.
///
/// When the sibling holding `target` is unreachable the search continues
/// with the target bit for that level flipped, so every node converges on the
/// same anchor: the populated address with the longest common prefix, ties
/// resolved by the following bits.
pub fn route_lookup(
    table: &RoutingTable,
    target: NetAddress,
    inval: &InvalidationSet,
    now: Micros,
) -> Option<(NetAddress, Level)> {
    let own = table.owner_addr();
    let mut t = target;
    loop {
        match select_next_hop(table, t, PacketKind::Naup, inval, false, now) {
            Selection::Deliver => return None,
            Selection::NextHop { hop, level } => return Some((hop, level)),
            Selection::Anchor | Selection::NoRoute => {
                let k = sibling_level(own, t).expect("t differs from own");
                t = t.flip_level_bit(k);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    /// Escalate DATA and NARP packets to higher siblings when the containing
    /// sibling has no entry.
    pub escalate: bool,
    pub max_retries: u8,
    pub invalidation_period: Micros,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            escalate: true,
            max_retries: 3,
            invalidation_period: 2 * crate::time::MICROS_PER_SEC,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardAction {
    Transmit {
        next_hop: NetAddress,
        level: Level,
    },
    Deliver,
    /// Lookup packet stops here: this node is the anchor for its target.
    Anchor,
    Drop(DropReason),
}

/// Handle a packet held by the table's owner. On transmit the packet's TTL is
/// decremented and its hop count incremented.
pub fn forward(
    packet: &mut DataPacket,
    table: &RoutingTable,
    inval: &InvalidationSet,
    cfg: &ForwardConfig,
    now: Micros,
) -> ForwardAction {
    let own = table.owner_addr();
    if packet.dst_addr == own {
        return if packet.kind.is_anchored() {
            ForwardAction::Anchor
        } else {
            ForwardAction::Deliver
        };
    }
    if packet.ttl == 0 {
        return ForwardAction::Drop(DropReason::Ttl);
    }
    let choice = if packet.kind.is_anchored() {
        match route_lookup(table, packet.dst_addr, inval, now) {
            Some((hop, level)) => Selection::NextHop { hop, level },
            None => Selection::Anchor,
        }
    } else {
        select_next_hop(table, packet.dst_addr, packet.kind, inval, cfg.escalate, now)
    };
    match choice {
        Selection::NextHop { hop, level } => {
            packet.ttl -= 1;
            packet.hop_count = packet.hop_count.saturating_add(1);
            ForwardAction::Transmit { next_hop: hop, level }
        }
        Selection::Deliver => ForwardAction::Deliver,
        Selection::Anchor => ForwardAction::Anchor,
        Selection::NoRoute => ForwardAction::Drop(DropReason::NoRoute),
    }
}

/// React to a missing ack for `packet` (as it was before the failed
/// transmission) sent to `failed_hop` for sibling `level`.
///
/// DART mode gives up at once. ATR mode bars the hop and re-forwards until
/// `max_retries` re-forwards have been spent.
pub fn on_ack_timeout(
    packet: &mut DataPacket,
    failed_hop: NetAddress,
    level: Level,
    table: &RoutingTable,
    inval: &mut InvalidationSet,
    cfg: &ForwardConfig,
    now: Micros,
) -> ForwardAction {
    if table.mode() == Mode::Dart {
        return ForwardAction::Drop(DropReason::Failed);
    }
    inval.bar(level, failed_hop, now + cfg.invalidation_period);
    if packet.retries >= cfg.max_retries {
        return ForwardAction::Drop(DropReason::Failed);
    }
    packet.retries += 1;
    match forward(packet, table, inval, cfg, now) {
        ForwardAction::Drop(DropReason::NoRoute) => ForwardAction::Drop(DropReason::Failed),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{HelloPacket, HelloRow, RouteLog};

    fn a(s: &str) -> NetAddress {
        s.parse().unwrap()
    }

    fn hello(from: &str, id: u32, rows: &[(u8, u16, &[&str])]) -> HelloPacket {
        let sender = a(from);
        HelloPacket {
            sender_addr: sender,
            sender_id: NodeId(id),
            rows: rows
                .iter()
                .map(|(k, cost, log)| HelloRow {
                    level: *k,
                    sibling: sender.sibling(*k).unwrap(),
                    nid: NodeId(1),
                    cost: *cost,
                    route_log: RouteLog::from_addrs(log.iter().map(|s| a(s))),
                })
                .collect(),
            piggyback: vec![],
        }
    }

    /// Node 001's ATR table in the four-node mesh {000, 001, 010, 100}.
    fn mesh_table(mode: Mode) -> RoutingTable {
        let mut t = RoutingTable::new(a("001"), NodeId(4), mode);
        t.process_hello(
            &hello("000", 1, &[(0, 1, &["001"]), (1, 1, &["010"]), (2, 1, &["100"])]),
            0,
        );
        t.process_hello(&hello("010", 3, &[(1, 1, &["000"]), (2, 1, &["100"])]), 0);
        t.process_hello(&hello("100", 2, &[(2, 1, &["000"])]), 0);
        t
    }

    fn packet(kind: PacketKind, dst: &str, ttl: u8) -> DataPacket {
        DataPacket {
            kind,
            src_id: NodeId(4),
            dst_id: NodeId(3),
            src_addr: a("001"),
            dst_addr: a(dst),
            ttl,
            hop_count: 0,
            payload_len: 64,
            seq: 0,
            retries: 0,
            target_id: None,
            pairs: vec![],
        }
    }

    #[test]
    fn least_cost_entry_wins() {
        let t = mesh_table(Mode::Atr);
        let inval = InvalidationSet::default();
        assert_eq!(
            select_next_hop(&t, a("010"), PacketKind::Data, &inval, true, 0),
            Selection::NextHop {
                hop: a("010"),
                level: 1
            }
        );
        assert_eq!(
            select_next_hop(&t, a("001"), PacketKind::Data, &inval, true, 0),
            Selection::Deliver
        );
    }

    #[test]
    fn barred_hop_falls_back_to_alternative() {
        let t = mesh_table(Mode::Atr);
        let mut inval = InvalidationSet::default();
        inval.bar(1, a("010"), 100);
        assert_eq!(
            select_next_hop(&t, a("010"), PacketKind::Data, &inval, true, 50),
            Selection::NextHop {
                hop: a("000"),
                level: 1
            }
        );
        // The bar lapses at `until`.
        assert_eq!(
            select_next_hop(&t, a("010"), PacketKind::Data, &inval, true, 100),
            Selection::NextHop {
                hop: a("010"),
                level: 1
            }
        );
    }

    #[test]
    fn escalates_to_higher_sibling_when_level_is_empty() {
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("100", 2, &[]), 0);
        let inval = InvalidationSet::default();
        assert_eq!(
            select_next_hop(&t, a("010"), PacketKind::Data, &inval, true, 0),
            Selection::NextHop {
                hop: a("100"),
                level: 2
            }
        );
        assert_eq!(
            select_next_hop(&t, a("010"), PacketKind::Data, &inval, false, 0),
            Selection::NoRoute
        );
        assert_eq!(
            select_next_hop(&t, a("010"), PacketKind::Naup, &inval, false, 0),
            Selection::Anchor
        );
    }

    #[test]
    fn escalation_skipped_when_level_has_entry() {
        let t = mesh_table(Mode::Atr);
        let inval = InvalidationSet::default();
        for dst in NetAddress::all(3).filter(|d| *d != a("001")) {
            let k = sibling_level(a("001"), dst).unwrap();
            match select_next_hop(&t, dst, PacketKind::Data, &inval, true, 0) {
                Selection::NextHop { level, .. } => assert_eq!(level, k),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn forward_decrements_ttl() {
        let t = mesh_table(Mode::Atr);
        let mut p = packet(PacketKind::Data, "010", 16);
        let act = forward(&mut p, &t, &InvalidationSet::default(), &ForwardConfig::default(), 0);
        assert_eq!(
            act,
            ForwardAction::Transmit {
                next_hop: a("010"),
                level: 1
            }
        );
        assert_eq!((p.ttl, p.hop_count), (15, 1));
        let mut dead = packet(PacketKind::Data, "010", 0);
        assert_eq!(
            forward(&mut dead, &t, &InvalidationSet::default(), &ForwardConfig::default(), 0),
            ForwardAction::Drop(DropReason::Ttl)
        );
    }

    #[test]
    fn empty_region_no_route_for_data_anchor_for_naup() {
        // Only 000 is known: the [1XX] region is empty.
        let mut t = RoutingTable::new(a("001"), NodeId(4), Mode::Atr);
        t.process_hello(&hello("000", 1, &[]), 0);
        let cfg = ForwardConfig {
            escalate: false,
            ..ForwardConfig::default()
        };
        let inval = InvalidationSet::default();
        let mut d = packet(PacketKind::Data, "110", 8);
        assert_eq!(
            forward(&mut d, &t, &inval, &cfg, 0),
            ForwardAction::Drop(DropReason::NoRoute)
        );
        // Region [1XX] is empty: the anchor is whichever of 000/001 agrees
        // with the target on the lower bits.
        let mut n = packet(PacketKind::Naup, "111", 8);
        assert_eq!(forward(&mut n, &t, &inval, &cfg, 0), ForwardAction::Anchor);
        let mut n = packet(PacketKind::Naup, "110", 8);
        assert_eq!(
            forward(&mut n, &t, &inval, &cfg, 0),
            ForwardAction::Transmit {
                next_hop: a("000"),
                level: 0
            }
        );
    }

    #[test]
    fn ack_timeout_reforwards_in_atr_and_drops_in_dart() {
        let cfg = ForwardConfig::default();
        let t = mesh_table(Mode::Atr);
        let mut inval = InvalidationSet::default();
        let mut p = packet(PacketKind::Data, "010", 16);
        let act = on_ack_timeout(&mut p, a("010"), 1, &t, &mut inval, &cfg, 0);
        assert_eq!(
            act,
            ForwardAction::Transmit {
                next_hop: a("000"),
                level: 1
            }
        );
        let t = mesh_table(Mode::Dart);
        let mut p = packet(PacketKind::Data, "010", 16);
        assert_eq!(
            on_ack_timeout(&mut p, a("010"), 1, &t, &mut InvalidationSet::default(), &cfg, 0),
            ForwardAction::Drop(DropReason::Failed)
        );
    }

    #[test]
    fn retries_are_capped() {
        let cfg = ForwardConfig {
            max_retries: 2,
            ..ForwardConfig::default()
        };
        let t = mesh_table(Mode::Atr);
        let mut inval = InvalidationSet::default();
        let original = packet(PacketKind::Data, "100", 16);
        let mut p = original.clone();
        let mut hop = match forward(&mut p, &t, &inval, &cfg, 0) {
            ForwardAction::Transmit { next_hop, .. } => next_hop,
            other => panic!("{other:?}"),
        };
        let mut reforwards = 0;
        let mut snapshot = original;
        loop {
            let mut q = snapshot.clone();
            match on_ack_timeout(&mut q, hop, 2, &t, &mut inval, &cfg, 0) {
                ForwardAction::Transmit { next_hop, .. } => {
                    reforwards += 1;
                    hop = next_hop;
                    snapshot.retries = q.retries;
                }
                ForwardAction::Drop(r) => {
                    assert_eq!(r, DropReason::Failed);
                    break;
                }
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(reforwards, 2);
    }
}
