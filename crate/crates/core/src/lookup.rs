//! Identifier-to-address lookup over a DHT laid on the address tree.
//!
//! Pairs are anchored at the node whose address is closest (longest common
//! prefix, then closest lower bits) to `hash_id(id)`. Relays cache every pair
//! they carry and hellos piggyback the most recently learned ones.

use std::collections::BTreeMap;

use crate::addressing::{NetAddress, NodeId};
use crate::time::Micros;

/// Map an identifier to its anchor address: low `width` bits of the id,
/// bit order reversed, most significant bit flipped.
pub fn hash_id(id: NodeId, width: u8) -> NetAddress {
    debug_assert!((1..=crate::addressing::MAX_WIDTH).contains(&width));
    let mask = (1u32 << width) - 1;
    let low = id.0 & mask;
    let reversed = low.reverse_bits() >> (32 - u32::from(width));
    let flipped = reversed ^ (1 << (width - 1));
    NetAddress::new(flipped, width).expect("masked to width")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdAddressPair {
    pub id: NodeId,
    pub addr: NetAddress,
    pub learned_at: Micros,
}

impl IdAddressPair {
    pub fn wire_len(width: u8) -> usize {
        4 + NetAddress::wire_len(width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheConfig {
    pub capacity: usize,
    pub ttl: Micros,
    pub piggyback: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity: 128,
            ttl: 20 * crate::time::MICROS_PER_SEC,
            piggyback: 4,
        }
    }
}

/// Bounded pair cache plus the anchor store of pairs this node is
/// responsible for.
#[derive(Clone, Debug)]
pub struct PairCache {
    config: CacheConfig,
    cached: BTreeMap<NodeId, IdAddressPair>,
    anchored: BTreeMap<NodeId, IdAddressPair>,
}

impl PairCache {
    pub fn new(config: CacheConfig) -> Self {
        PairCache {
            config,
            cached: BTreeMap::new(),
            anchored: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Insert a pair unless an equally new or newer one is already held.
    pub fn learn(&mut self, pair: IdAddressPair) {
        match self.cached.get(&pair.id) {
            Some(cur) if cur.learned_at > pair.learned_at => return,
            Some(cur) if cur.learned_at == pair.learned_at && cur.addr == pair.addr => return,
            _ => {}
        }
        self.cached.insert(pair.id, pair);
        while self.cached.len() > self.config.capacity {
            let oldest = self
                .cached
                .values()
                .min_by_key(|p| (p.learned_at, p.id))
                .map(|p| p.id)
                .expect("non-empty");
            self.cached.remove(&oldest);
        }
    }

    /// Store a pair this node anchors. Anchored pairs ignore the capacity
    /// bound and the time-to-live.
    pub fn anchor(&mut self, pair: IdAddressPair) {
        match self.anchored.get(&pair.id) {
            Some(cur) if cur.learned_at > pair.learned_at => {}
            _ => {
                self.anchored.insert(pair.id, pair);
            }
        }
    }

    /// Freshest known address for `id`, ignoring cached pairs older than the TTL.
    pub fn get(&self, id: NodeId, now: Micros) -> Option<IdAddressPair> {
        let cached = self
            .cached
            .get(&id)
            .filter(|p| now.saturating_sub(p.learned_at) <= self.config.ttl);
        match (cached, self.anchored.get(&id)) {
            (Some(c), Some(a)) => Some(if c.learned_at >= a.learned_at { *c } else { *a }),
            (Some(c), None) => Some(*c),
            (None, a) => a.copied(),
        }
    }

    pub fn cached(&self, id: NodeId) -> Option<&IdAddressPair> {
        self.cached.get(&id)
    }

    pub fn anchored(&self, id: NodeId) -> Option<&IdAddressPair> {
        self.anchored.get(&id)
    }

    pub fn cached_len(&self) -> usize {
        self.cached.len()
    }

    pub fn anchored_len(&self) -> usize {
        self.anchored.len()
    }

    pub fn clear_anchors(&mut self) {
        self.anchored.clear();
    }

    /// Up to `piggyback` fresh pairs, most recently learned first.
    pub fn piggyback(&self, now: Micros) -> Vec<IdAddressPair> {
        let mut fresh: Vec<_> = self
            .cached
            .values()
            .filter(|p| now.saturating_sub(p.learned_at) <= self.config.ttl)
            .copied()
            .collect();
        fresh.sort_by_key(|p| (std::cmp::Reverse(p.learned_at), p.id));
        fresh.truncate(self.config.piggyback);
        fresh
    }

    /// Merge pairs heard in a neighbour's hello.
    pub fn absorb_piggyback(&mut self, pairs: &[IdAddressPair]) {
        for p in pairs {
            self.learn(*p);
        }
    }
}

/// Sizes of the lookup control packets.
///
/// Every packet starts with `kind (1) + ttl (1) + destination address`; a
/// NAUP then carries one pair, a NARQ the requester pair and the 4-byte
/// target id, a NARP the requester, target and replier pairs.
pub fn control_wire_len(kind: crate::forwarding::PacketKind, width: u8) -> usize {
    use crate::forwarding::PacketKind;
    let header = 2 + NetAddress::wire_len(width);
    let pair = IdAddressPair::wire_len(width);
    match kind {
        PacketKind::Naup => header + pair,
        PacketKind::Narq => header + pair + 4,
        PacketKind::Narp => header + 3 * pair,
        PacketKind::Data => header,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::MICROS_PER_SEC;

    fn a(s: &str) -> NetAddress {
        s.parse().unwrap()
    }

    #[test]
    fn hash_examples() {
        assert_eq!(hash_id(NodeId(6), 3), a("111"));
        assert_eq!(hash_id(NodeId(0), 3), a("100"));
        assert_eq!(hash_id(NodeId(1), 3), a("000"));
    }

    #[test]
    fn hash_folds_wide_ids() {
        // 0b1_0110 keeps its low three bits 110.
        assert_eq!(hash_id(NodeId(0b1_0110), 3), hash_id(NodeId(6), 3));
    }

    #[test]
    fn hash_is_bijective() {
        for width in [3u8, 8, 12, 16] {
            let mut seen = vec![false; 1 << width];
            for id in 0..1u32 << width {
                let h = hash_id(NodeId(id), width).bits() as usize;
                assert!(!seen[h]);
                seen[h] = true;
            }
        }
    }

    fn pair(id: u32, addr: &str, t: Micros) -> IdAddressPair {
        IdAddressPair {
            id: NodeId(id),
            addr: a(addr),
            learned_at: t,
        }
    }

    #[test]
    fn stale_cache_entries_are_hidden() {
        let mut c = PairCache::new(CacheConfig::default());
        c.learn(pair(1, "010", 0));
        assert!(c.get(NodeId(1), 20 * MICROS_PER_SEC).is_some());
        assert!(c.get(NodeId(1), 20 * MICROS_PER_SEC + 1).is_none());
        c.anchor(pair(1, "011", 0));
        assert_eq!(c.get(NodeId(1), 100 * MICROS_PER_SEC).unwrap().addr, a("011"));
    }

    #[test]
    fn newest_pair_wins() {
        let mut c = PairCache::new(CacheConfig::default());
        c.learn(pair(1, "010", 5));
        c.learn(pair(1, "110", 3));
        assert_eq!(c.get(NodeId(1), 5).unwrap().addr, a("010"));
        c.learn(pair(1, "111", 9));
        assert_eq!(c.get(NodeId(1), 9).unwrap().addr, a("111"));
    }

    #[test]
    fn capacity_evicts_least_recently_learned() {
        let mut c = PairCache::new(CacheConfig {
            capacity: 2,
            ..CacheConfig::default()
        });
        c.learn(pair(1, "000", 1));
        c.learn(pair(2, "001", 2));
        c.learn(pair(3, "010", 3));
        assert_eq!(c.cached_len(), 2);
        assert!(c.cached(NodeId(1)).is_none());
        for i in 10..20 {
            c.anchor(pair(i, "111", 0));
        }
        assert_eq!(c.anchored_len(), 10);
    }

    #[test]
    fn piggyback_is_bounded_and_fresh() {
        let mut c = PairCache::new(CacheConfig::default());
        c.learn(pair(1, "000", 0));
        c.learn(pair(2, "001", MICROS_PER_SEC));
        assert_eq!(c.piggyback(MICROS_PER_SEC).len(), 2);
        for i in 3..10 {
            c.learn(pair(i, "010", 2 * MICROS_PER_SEC + u64::from(i)));
        }
        let p = c.piggyback(3 * MICROS_PER_SEC);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].id, NodeId(9));
        // Pair 1 is 21 s old by then.
        assert!(c.piggyback(21 * MICROS_PER_SEC).iter().all(|q| q.id != NodeId(1)));
    }

    #[test]
    fn piggyback_propagates_between_caches() {
        let mut sender = PairCache::new(CacheConfig::default());
        let mut receiver = PairCache::new(CacheConfig::default());
        sender.learn(pair(7, "101", 0));
        receiver.absorb_piggyback(&sender.piggyback(MICROS_PER_SEC));
        assert_eq!(receiver.get(NodeId(7), MICROS_PER_SEC).unwrap().addr, a("101"));
    }

    proptest::proptest! {
        #[test]
        fn hash_is_injective_on_the_low_bits(x in 0u32..1 << 16, y in 0u32..1 << 16, width in 3u8..=16) {
            let mask = (1u32 << width) - 1;
            let (hx, hy) = (hash_id(NodeId(x), width), hash_id(NodeId(y), width));
            proptest::prop_assert_eq!(hx == hy, x & mask == y & mask);
        }
    }
}
