//! Address allocation: founding, joining through a neighbour's free sibling,
//! and detection of duplicated or disconnected addresses through NIDs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::addressing::{Level, NetAddress, NodeId};
use crate::error::AddressError;
use crate::routing::{HelloPacket, RoutingTable};
use crate::time::Micros;

/// How a joining node ranks the neighbours it heard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    /// Largest free sibling, then lowest identifier; scroll on failure.
    Atr,
    /// Largest free sibling only, first heard on ties; no scrolling.
    Dart,
}

impl std::fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionRule::Atr => "atr",
            SelectionRule::Dart => "dart",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Unaddressed,
    /// Hellos heard, waiting for the listening window to close.
    Probing,
    Addressed,
}

/// The first node of a network takes the all-zeros address and controls the
/// whole space.
pub fn found_network(width: u8) -> Result<NetAddress, AddressError> {
    NetAddress::zero(width)
}

/// Pick the neighbour to join through. `heard` is in arrival order.
///
/// Only senders that advertise the lowest network NID are candidates, so a
/// node caught between two merging networks joins the one that survives.
pub fn choose_neighbor<'a>(
    heard: &'a [HelloPacket],
    tried: &BTreeSet<NetAddress>,
    rule: SelectionRule,
) -> Option<&'a HelloPacket> {
    choose_neighbor_avoiding(heard, tried, None, rule)
}

fn choose_neighbor_avoiding<'a>(
    heard: &'a [HelloPacket],
    tried: &BTreeSet<NetAddress>,
    avoid: Option<&Quarantine>,
    rule: SelectionRule,
) -> Option<&'a HelloPacket> {
    let fresh: Vec<&HelloPacket> = heard
        .iter()
        .filter(|h| !tried.contains(&h.sender_addr))
        .filter(|h| !avoid.is_some_and(|q| q.covers(h.sender_addr)))
        .collect();
    let best_net = fresh.iter().map(|h| h.network_nid()).min()?;
    let free = |h: &HelloPacket| h.highest_free_level().map_or(-1, i32::from);
    let candidates = fresh.into_iter().filter(|h| h.network_nid() == best_net);
    match rule {
        SelectionRule::Atr => candidates.min_by_key(|h| (std::cmp::Reverse(free(h)), h.sender_id)),
        // max_by_key keeps the last maximum; reverse to keep the first heard.
        SelectionRule::Dart => candidates.rev().max_by_key(|h| free(h)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoFreeSibling;

/// Lowest address of the neighbour's highest sibling for which it advertises
/// no route.
pub fn derive_address(neighbor: &HelloPacket) -> Result<NetAddress, NoFreeSibling> {
    let k = neighbor.highest_free_level().ok_or(NoFreeSibling)?;
    Ok(neighbor
        .sender_addr
        .sibling(k)
        .expect("free level below width")
        .lowest_address())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConflictKind {
    /// Another node holds the same address.
    Duplicate,
    /// A lower identifier lives in the node's own subtree but cannot be
    /// reached inside it: the address no longer fits the topology.
    Invalid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConflictEvent {
    pub kind: ConflictKind,
    pub level: Level,
    pub other: NodeId,
    /// The node whose network has the larger NID relinquishes its address;
    /// within one network, the larger identifier does.
    pub self_yields: bool,
}

/// Immediate check of one hello against the receiver's identity.
///
/// Flags a sender using the receiver's address under another id, or a
/// level-0 row (which names exactly the receiver's address) with a foreign NID.
/// `own_network` is the lowest id in the receiver's table.
pub fn detect_duplicate(
    own_addr: NetAddress,
    own_id: NodeId,
    own_network: NodeId,
    hello: &HelloPacket,
) -> Option<ConflictEvent> {
    if hello.sender_addr == own_addr {
        return (hello.sender_id != own_id).then_some(ConflictEvent {
            kind: ConflictKind::Duplicate,
            level: 0,
            other: hello.sender_id,
            self_yields: (own_network, own_id) > (hello.network_nid(), hello.sender_id),
        });
    }
    let sl = crate::addressing::sibling_level(own_addr, hello.sender_addr).ok()?;
    if sl != 0 {
        return None;
    }
    let row = hello.row(0)?;
    (row.nid != own_id).then_some(ConflictEvent {
        kind: ConflictKind::Duplicate,
        level: 0,
        other: row.nid,
        self_yields: own_id > row.nid,
    })
}

/// Tracks NID claims made by neighbours about the owner's own subtrees and
/// raises a conflict once a lower foreign NID has been claimed continuously
/// for the hold time.
#[derive(Clone, Debug, Default)]
pub struct ConflictMonitor {
    since: Vec<Option<Micros>>,
}

impl ConflictMonitor {
    pub fn reset(&mut self) {
        self.since.clear();
    }

    pub fn evaluate(&mut self, table: &RoutingTable, now: Micros, hold: Micros) -> Option<ConflictEvent> {
        let width = table.width() as usize;
        self.since.resize(width, None);
        let mut found = None;
        for k in 0..width {
            let level = k as Level;
            let claimed = table
                .neighbors()
                .values()
                .filter(|n| n.level == level)
                .filter_map(|n| n.claim())
                .min();
            let own = table.subtree_nid(level);
            match claimed {
                Some(c) if c < own => {
                    let since = *self.since[k].get_or_insert(now);
                    if found.is_none() && now.saturating_sub(since) >= hold {
                        found = Some(ConflictEvent {
                            kind: if k == 0 {
                                ConflictKind::Duplicate
                            } else {
                                ConflictKind::Invalid
                            },
                            level,
                            other: c,
                            self_yields: true,
                        });
                    }
                }
                _ => self.since[k] = None,
            }
        }
        found
    }
}

/// Region a node was just evicted from. Until `until`, it neither joins
/// through a node inside the region nor takes an address inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quarantine {
    pub addr: NetAddress,
    pub level: Level,
    pub until: Micros,
}

impl Quarantine {
    pub fn covers(&self, a: NetAddress) -> bool {
        let len = self.addr.width() - self.level;
        a.width() == self.addr.width() && a.prefix(len) == self.addr.prefix(len)
    }
}

/// Outcome of one pass over the heard neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinOutcome {
    Acquired {
        addr: NetAddress,
        via: NetAddress,
    },
    /// No usable neighbour left; back off and listen again.
    Exhausted,
}

#[derive(Clone, Debug)]
pub struct AllocationState {
    pub phase: Phase,
    pub address: Option<NetAddress>,
    pub tried: BTreeSet<NetAddress>,
    /// Latest hello per sender, in order of first arrival.
    pub heard: Vec<HelloPacket>,
    pub acquired_at: Option<Micros>,
    pub last_duplicate_at: Option<Micros>,
    pub last_invalid_at: Option<Micros>,
    pub quarantine: Option<Quarantine>,
}

impl Default for AllocationState {
    fn default() -> Self {
        AllocationState {
            phase: Phase::Unaddressed,
            address: None,
            tried: BTreeSet::new(),
            heard: Vec::new(),
            acquired_at: None,
            last_duplicate_at: None,
            last_invalid_at: None,
            quarantine: None,
        }
    }
}

impl AllocationState {
    /// Record a hello heard while unaddressed. Returns true on the first one,
    /// which opens the listening window.
    pub fn hear(&mut self, hello: &HelloPacket) -> bool {
        debug_assert!(self.phase != Phase::Addressed);
        match self.heard.iter_mut().find(|h| h.sender_addr == hello.sender_addr) {
            Some(h) => *h = hello.clone(),
            None => self.heard.push(hello.clone()),
        }
        if self.phase == Phase::Unaddressed {
            self.phase = Phase::Probing;
            true
        } else {
            false
        }
    }

    /// Scroll through the heard neighbours until one yields an address.
    pub fn attempt_join(&mut self, rule: SelectionRule, now: Micros) -> JoinOutcome {
        if self.quarantine.is_some_and(|q| now >= q.until) {
            self.quarantine = None;
        }
        loop {
            let q = self.quarantine.as_ref();
            let Some(h) = choose_neighbor_avoiding(&self.heard, &self.tried, q, rule) else {
                self.tried.clear();
                return JoinOutcome::Exhausted;
            };
            let via = h.sender_addr;
            match derive_address(h).and_then(|a| match q {
                Some(q) if q.covers(a) => Err(NoFreeSibling),
                _ => Ok(a),
            }) {
                Ok(addr) => {
                    self.tried.insert(via);
                    self.acquire(addr, now);
                    return JoinOutcome::Acquired { addr, via };
                }
                Err(NoFreeSibling) => {
                    if rule == SelectionRule::Dart {
                        self.tried.clear();
                        return JoinOutcome::Exhausted;
                    }
                    self.tried.insert(via);
                }
            }
        }
    }

    pub fn acquire(&mut self, addr: NetAddress, now: Micros) {
        self.phase = Phase::Addressed;
        self.address = Some(addr);
        self.acquired_at = Some(now);
        self.heard.clear();
    }

    /// Give up the current address after a conflict at `level`. ATR keeps the
    /// neighbours already tried during this join cycle so the next attempt
    /// moves on to another one, and quarantines the region it was evicted
    /// from for `quarantine` microseconds.
    pub fn relinquish(
        &mut self,
        kind: ConflictKind,
        level: Level,
        rule: SelectionRule,
        now: Micros,
        quarantine: Micros,
    ) {
        if let (Some(addr), true) = (self.address, quarantine > 0) {
            self.quarantine = Some(Quarantine {
                addr,
                level,
                until: now + quarantine,
            });
        }
        match kind {
            ConflictKind::Duplicate => self.last_duplicate_at = Some(now),
            ConflictKind::Invalid => self.last_invalid_at = Some(now),
        }
        if rule == SelectionRule::Dart {
            self.tried.clear();
        }
        self.phase = Phase::Unaddressed;
        self.address = None;
        self.acquired_at = None;
        self.heard.clear();
    }

    /// Called once an address has survived its probation period.
    pub fn confirm(&mut self) {
        self.tried.clear();
    }

    pub fn reset_listening(&mut self) {
        self.heard.clear();
        if self.phase == Phase::Probing {
            self.phase = Phase::Unaddressed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{HelloRow, Mode, RouteLog};

    fn a(s: &str) -> NetAddress {
        s.parse().unwrap()
    }

    fn hello(from: &str, id: u32, levels: &[u8]) -> HelloPacket {
        let sender = a(from);
        HelloPacket {
            sender_addr: sender,
            sender_id: NodeId(id),
            rows: levels
                .iter()
                .map(|k| HelloRow {
                    level: *k,
                    sibling: sender.sibling(*k).unwrap(),
                    nid: NodeId(1),
                    cost: 1,
                    route_log: RouteLog::single(sender.sibling(*k).unwrap().lowest_address()),
                })
                .collect(),
            piggyback: vec![],
        }
    }

    #[test]
    fn founder_takes_all_zeros() {
        assert_eq!(found_network(3).unwrap(), a("000"));
        assert_eq!(found_network(8).unwrap().to_string(), "00000000");
    }

    #[test]
    fn joiner_takes_highest_free_sibling() {
        assert_eq!(derive_address(&hello("000", 1, &[])).unwrap(), a("100"));
        assert_eq!(derive_address(&hello("000", 1, &[2])).unwrap(), a("010"));
        assert_eq!(derive_address(&hello("000", 1, &[1, 2])).unwrap(), a("001"));
        assert_eq!(derive_address(&hello("000", 1, &[0, 1, 2])), Err(NoFreeSibling));
    }

    #[test]
    fn prefers_larger_free_space_then_lower_id() {
        let heard = vec![hello("000", 7, &[2]), hello("100", 9, &[1])];
        let none = BTreeSet::new();
        assert_eq!(
            choose_neighbor(&heard, &none, SelectionRule::Atr).unwrap().sender_id,
            NodeId(9)
        );
        let tie = vec![hello("000", 7, &[2]), hello("010", 4, &[2])];
        assert_eq!(
            choose_neighbor(&tie, &none, SelectionRule::Atr).unwrap().sender_id,
            NodeId(4)
        );
        assert_eq!(
            choose_neighbor(&tie, &none, SelectionRule::Dart).unwrap().sender_id,
            NodeId(7)
        );
    }

    #[test]
    fn lower_network_nid_wins_candidate_filter() {
        let mut other_net = hello("000", 9, &[]);
        other_net.rows.push(HelloRow {
            level: 2,
            sibling: a("000").sibling(2).unwrap(),
            nid: NodeId(2),
            cost: 3,
            route_log: RouteLog::single(a("100")),
        });
        let heard = vec![hello("000", 5, &[]), other_net];
        let h = choose_neighbor(&heard, &BTreeSet::new(), SelectionRule::Atr).unwrap();
        assert_eq!(h.sender_id, NodeId(9));
    }

    #[test]
    fn scrolls_to_next_neighbour_after_relinquish() {
        let mut st = AllocationState::default();
        st.hear(&hello("000", 1, &[1, 2]));
        st.hear(&hello("100", 2, &[2]));
        // 100 offers the larger space [11X].
        match st.attempt_join(SelectionRule::Atr, 5) {
            JoinOutcome::Acquired { addr, via } => {
                assert_eq!((addr, via), (a("110"), a("100")));
            }
            other => panic!("{other:?}"),
        }
        st.relinquish(ConflictKind::Invalid, 2, SelectionRule::Atr, 6, 0);
        st.hear(&hello("000", 1, &[1, 2]));
        st.hear(&hello("100", 2, &[2]));
        match st.attempt_join(SelectionRule::Atr, 7) {
            JoinOutcome::Acquired { addr, via } => {
                assert_eq!((addr, via), (a("001"), a("000")));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(st.phase, Phase::Addressed);
    }

    #[test]
    fn full_neighbours_exhaust_the_attempt() {
        let mut st = AllocationState::default();
        st.hear(&hello("000", 1, &[0, 1, 2]));
        assert_eq!(st.attempt_join(SelectionRule::Atr, 5), JoinOutcome::Exhausted);
        assert_eq!(st.last_invalid_at, None);
        assert!(st.tried.is_empty());
    }

    #[test]
    fn dart_rule_does_not_scroll() {
        let mut st = AllocationState::default();
        st.hear(&hello("000", 1, &[0, 1, 2]));
        st.hear(&hello("100", 2, &[0, 1, 2]));
        assert_eq!(st.attempt_join(SelectionRule::Dart, 0), JoinOutcome::Exhausted);
        assert!(st.tried.is_empty());
    }

    #[test]
    fn four_joins_around_founder_fill_the_mesh() {
        // Brute force: every join happens through 000 with a full view of the mesh.
        let founder = found_network(3).unwrap();
        let mut population = vec![founder];
        for _ in 0..3 {
            let mut t = RoutingTable::new(founder, NodeId(1), Mode::Atr);
            for (i, p) in population.iter().enumerate().skip(1) {
                t.process_hello(
                    &HelloPacket {
                        sender_addr: *p,
                        sender_id: NodeId(i as u32 + 1),
                        rows: vec![],
                        piggyback: vec![],
                    },
                    0,
                );
            }
            population.push(derive_address(&t.build_hello()).unwrap());
        }
        assert_eq!(population, vec![a("000"), a("100"), a("010"), a("001")]);
    }

    #[test]
    fn colliding_nodes_larger_id_yields() {
        let ev = detect_duplicate(a("011"), NodeId(9), NodeId(9), &hello("011", 5, &[])).unwrap();
        assert!(ev.self_yields);
        let ev = detect_duplicate(a("011"), NodeId(5), NodeId(5), &hello("011", 9, &[])).unwrap();
        assert!(!ev.self_yields);
        assert_eq!(ev.kind, ConflictKind::Duplicate);
        assert!(detect_duplicate(a("011"), NodeId(5), NodeId(5), &hello("001", 2, &[2])).is_none());
    }

    #[test]
    fn colliding_node_of_the_higher_network_yields() {
        // The sender's rows carry NID 1: its network outranks ours despite its larger id.
        let ev = detect_duplicate(a("011"), NodeId(5), NodeId(3), &hello("011", 9, &[2])).unwrap();
        assert!(ev.self_yields);
        let ev = detect_duplicate(a("011"), NodeId(9), NodeId(1), &hello("011", 5, &[])).unwrap();
        assert!(!ev.self_yields);
    }

    #[test]
    fn level_zero_row_with_foreign_nid_is_duplicate() {
        // 010 says the holder of 011 has id 3, we are 011 with id 8.
        let mut h = hello("010", 1, &[0]);
        h.rows[0].nid = NodeId(3);
        let ev = detect_duplicate(a("011"), NodeId(8), NodeId(8), &h).unwrap();
        assert!(ev.self_yields);
        h.rows[0].nid = NodeId(8);
        assert!(detect_duplicate(a("011"), NodeId(8), NodeId(8), &h).is_none());
    }

    #[test]
    fn monitor_needs_sustained_claim() {
        let mut t = RoutingTable::new(a("011"), NodeId(8), Mode::Atr);
        let mut h = hello("010", 9, &[0]);
        h.rows[0].nid = NodeId(3);
        t.process_hello(&h, 0);
        let mut m = ConflictMonitor::default();
        assert!(m.evaluate(&t, 0, 3).is_none());
        assert!(m.evaluate(&t, 2, 3).is_none());
        let ev = m.evaluate(&t, 3, 3).unwrap();
        assert_eq!(ev.kind, ConflictKind::Duplicate);
        // A consistent claim clears the suspicion.
        h.rows[0].nid = NodeId(8);
        t.process_hello(&h, 4);
        assert!(m.evaluate(&t, 10, 3).is_none());
    }

    #[test]
    fn relinquish_records_event_time() {
        let mut st = AllocationState::default();
        st.acquire(a("011"), 0);
        st.tried.insert(a("010"));
        st.relinquish(ConflictKind::Duplicate, 0, SelectionRule::Atr, 7, 0);
        assert_eq!(st.last_duplicate_at, Some(7));
        assert_eq!(st.phase, Phase::Unaddressed);
        assert!(st.address.is_none());
        assert!(st.tried.contains(&a("010")));
    }
}
