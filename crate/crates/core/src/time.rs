//! Simulation clock: integer microseconds.

pub type Micros = u64;

pub const MICROS_PER_SEC: u64 = 1_000_000;

pub fn from_secs(s: f64) -> Micros {
    (s * MICROS_PER_SEC as f64).round() as Micros
}

pub fn to_secs(t: Micros) -> f64 {
    t as f64 / MICROS_PER_SEC as f64
}
