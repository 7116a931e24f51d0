//! Constant-bit-rate flow schedule.

use rand::Rng;

use crate::time::{from_secs, Micros};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficConfig {
    /// Offered load summed over all flows, bit/s.
    pub global_load: f64,
    pub flow_count: usize,
    pub start: f64,
    pub end: f64,
    pub payload_bytes: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flow {
    pub src: usize,
    pub dst: usize,
    pub rate: f64,
    pub start: Micros,
    pub end: Micros,
    pub payload_bytes: u32,
}

impl Flow {
    pub fn interval(&self) -> Micros {
        from_secs(f64::from(self.payload_bytes) * 8.0 / self.rate).max(1)
    }

    /// Send instants in `[start, end)`.
    pub fn send_times(&self) -> impl Iterator<Item = Micros> + '_ {
        let step = self.interval();
        (0..)
            .map(move |i| self.start + i * step)
            .take_while(move |t| *t < self.end)
    }
}

/// `flow_count` flows between distinct random nodes sharing the global load,
/// each active over a random sub-window of `[start, end]`.
pub fn traffic_gen(n: usize, cfg: &TrafficConfig, rng: &mut impl Rng) -> Vec<Flow> {
    if n < 2 || cfg.flow_count == 0 {
        return Vec::new();
    }
    let rate = cfg.global_load / cfg.flow_count as f64;
    (0..cfg.flow_count)
        .map(|_| {
            let src = rng.gen_range(0..n);
            let mut dst = rng.gen_range(0..n - 1);
            if dst >= src {
                dst += 1;
            }
            let (mut a, mut b) = (cfg.start, cfg.start);
            while a >= b && cfg.end > cfg.start {
                a = rng.gen_range(cfg.start..=cfg.end);
                b = rng.gen_range(cfg.start..=cfg.end);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
            }
            Flow {
                src,
                dst,
                rate,
                start: from_secs(a),
                end: from_secs(b),
                payload_bytes: cfg.payload_bytes,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::rng::{substream, Purpose};
    use proptest::prelude::*;

    fn cfg(flows: usize) -> TrafficConfig {
        TrafficConfig {
            global_load: 250_000.0,
            flow_count: flows,
            start: 450.0,
            end: 720.0,
            payload_bytes: 512,
        }
    }

    #[test]
    fn ten_flows_at_25_kbps() {
        let flows = traffic_gen(32, &cfg(10), &mut substream(1, Purpose::Traffic, 0));
        assert_eq!(flows.len(), 10);
        for f in &flows {
            assert!((f.rate - 25_000.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn flows_are_well_formed(seed in 0u64..500, count in 1usize..40, n in 2usize..100) {
            let flows = traffic_gen(n, &cfg(count), &mut substream(seed, Purpose::Traffic, 0));
            let total: f64 = flows.iter().map(|f| f.rate).sum();
            prop_assert!((total - 250_000.0).abs() < 1e-6);
            for f in &flows {
                prop_assert!(f.src != f.dst && f.src < n && f.dst < n);
                prop_assert!(f.start < f.end);
                for t in f.send_times() {
                    prop_assert!(t >= from_secs(450.0) && t <= from_secs(720.0));
                }
            }
        }
    }
}
