//! Batches of independent runs executed in parallel, and their aggregation
//! into one mean/stddev row per (node count, mode).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::ScenarioError;
use crate::metrics::{mean_std, RunMetrics};
use crate::netsim::{run, RunOutput, Scenario, SimOptions};
use crate::routing::Mode;

/// One scenario per (n, mode, seed), ordered by n, then mode, then seed.
/// Each n keeps the base scenario's node density.
pub fn plan(base: &Scenario, ns: &[usize], modes: &[Mode], seeds: &[u64]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &n in ns {
        let scaled = base.scaled_to(n);
        for &mode in modes {
            for &seed in seeds {
                let mut s = scaled.with_mode(mode);
                s.seed = seed;
                out.push(s);
            }
        }
    }
    out
}

/// Run every scenario on the rayon pool. Results keep the input order.
pub fn run_all(jobs: Vec<Scenario>, opts: SimOptions) -> Vec<Result<RunOutput, ScenarioError>> {
    jobs.into_par_iter().map(|s| run(s, opts)).collect()
}

/// Columns aggregated by [`aggregate`].
pub const AGG_METRICS: [&str; 9] = [
    "pdr",
    "mean_hops",
    "stretch",
    "overhead_bytes",
    "mean_table_entries",
    "alloc_last_event",
    "addr_update_rate",
    "mean_changed_bits",
    "duplicate_addresses_at_end",
];

fn metric(m: &RunMetrics, name: &str) -> f64 {
    match name {
        "pdr" => m.pdr,
        "mean_hops" => m.mean_hops,
        "stretch" => m.stretch,
        "overhead_bytes" => m.overhead_bytes as f64,
        "mean_table_entries" => m.mean_table_entries,
        "alloc_last_event" => m.alloc_last_event().unwrap_or(0.0),
        "addr_update_rate" => m.addr_update_rate,
        "mean_changed_bits" => m.mean_changed_bits,
        "duplicate_addresses_at_end" => m.duplicate_addresses_at_end as f64,
        _ => unreachable!("unknown aggregate column {name}"),
    }
}

pub fn aggregate_header() -> String {
    let mut h = String::from("node_count,mode,runs");
    for m in AGG_METRICS {
        let _ = write!(h, ",{m}_mean,{m}_std");
    }
    h
}

/// One CSV line per (node count, mode), sorted by that key.
pub fn aggregate(rows: &[RunMetrics]) -> Vec<String> {
    let mut groups: BTreeMap<(usize, String), Vec<&RunMetrics>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.node_count, r.key.mode.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((n, mode), g)| {
            let mut line = format!("{n},{mode},{}", g.len());
            for name in AGG_METRICS {
                let xs: Vec<f64> = g.iter().map(|m| metric(m, name)).collect();
                let (mean, std) = mean_std(&xs);
                let _ = write!(line, ",{mean},{std}");
            }
            line
        })
        .collect()
}

/// Mean of one aggregate column across the rows of `(n, mode)`.
pub fn mean_of(rows: &[RunMetrics], n: usize, mode: Mode, name: &str) -> Option<f64> {
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.node_count == n && r.key.mode == mode.to_string())
        .map(|r| metric(r, name))
        .collect();
    (!xs.is_empty()).then(|| mean_std(&xs).0)
}
