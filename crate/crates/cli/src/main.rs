//! `atr`: run scenarios, sweep node counts, dump overlays and hash ids.
//!
//! Exit status: 0 on success, 1 on a configuration error, 2 on a runtime
//! error such as an unwritable output file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atr_core::metrics::CSV_HEADER;
use atr_core::netsim::{LookupMode, Scenario, SimOptions, Simulator};
use atr_core::{hash_id, overlay, sweep, Mode, NodeId, ScenarioError};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "atr", version, about = "Address-tree routing simulator (ATR and DART)")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario for every seed and mode; one CSV row per run.
    Run(RunArgs),
    /// Run a scenario at several node counts with the density held fixed.
    Sweep(SweepArgs),
    /// Physical and overlay adjacency matrices, next-hop graphs and tables.
    DumpOverlay(OverlayArgs),
    /// Print the DHT anchor address of an identifier.
    Hash(HashArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Atr,
    Dart,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LookupArg {
    Dht,
    Oracle,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Single seed (overrides the scenario's seed).
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed list: comma-separated values and inclusive ranges, e.g. 1-5,9.
    #[arg(long)]
    seeds: Option<String>,
    /// Protocol mode; defaults to the scenario's.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Lookup mode; defaults to the scenario's.
    #[arg(long, value_enum)]
    lookup: Option<LookupArg>,
    /// Output directory; results go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Write the event trace of every run (requires --out).
    #[arg(long)]
    trace: bool,
    /// Write every node's routing table at the end of each run.
    #[arg(long)]
    tables: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Node counts, comma-separated.
    #[arg(long, default_value = "16,32,64,128", value_delimiter = ',')]
    nodes: Vec<usize>,
}

#[derive(Args)]
struct OverlayArgs {
    #[command(flatten)]
    common: Common,
    /// Simulated time (seconds) at which to take the snapshot; defaults to
    /// the scenario duration.
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Args)]
struct HashArgs {
    /// Node identifier.
    #[arg(long)]
    id: u32,
    /// Address width l.
    #[arg(long)]
    bits: u8,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Config(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

fn parse_seeds(spec: &str) -> Res<Vec<u64>> {
    let bad = || Failure::Config(format!("--seeds: cannot parse {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

impl Common {
    fn base(&self) -> Res<Scenario> {
        let mut s = Scenario::load(&self.scenario)?;
        if let Some(l) = self.lookup {
            s.lookup = match l {
                LookupArg::Dht => LookupMode::Dht,
                LookupArg::Oracle => LookupMode::Oracle,
            };
        }
        Ok(s)
    }

    fn seeds(&self, base: &Scenario) -> Res<Vec<u64>> {
        match (&self.seeds, self.seed) {
            (Some(spec), _) => parse_seeds(spec),
            (None, Some(s)) => Ok(vec![s]),
            (None, None) => Ok(vec![base.seed]),
        }
    }

    fn modes(&self, base: &Scenario) -> Vec<Mode> {
        match self.mode {
            None => vec![base.mode],
            Some(ModeArg::Atr) => vec![Mode::Atr],
            Some(ModeArg::Dart) => vec![Mode::Dart],
            Some(ModeArg::Both) => vec![Mode::Atr, Mode::Dart],
        }
    }

    /// Scenario per (mode, seed). A mode taken from the file keeps the
    /// file's join rule; an overridden mode brings its own.
    fn jobs(&self, base: &Scenario) -> Res<Vec<Scenario>> {
        let seeds = self.seeds(base)?;
        let mut jobs = Vec::new();
        for mode in self.modes(base) {
            for &seed in &seeds {
                let mut s = if self.mode.is_some() {
                    base.with_mode(mode)
                } else {
                    base.clone()
                };
                s.seed = seed;
                jobs.push(s);
            }
        }
        Ok(jobs)
    }
}

/// Collects named outputs, refusing to overwrite unless forced.
struct Sink {
    dir: Option<PathBuf>,
    force: bool,
    /// Precede each output with its name when writing to stdout.
    labelled: bool,
}

impl Sink {
    fn new(common: &Common, labelled: bool) -> Res<Sink> {
        if let Some(d) = &common.out {
            fs::create_dir_all(d).map_err(|e| Failure::Runtime(format!("{}: {e}", d.display())))?;
        }
        Ok(Sink {
            dir: common.out.clone(),
            force: common.force,
            labelled,
        })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    /// Fail before any simulation runs if a target already exists.
    fn check(&self, names: &[String]) -> Res<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            if let Some(p) = self.path(n).filter(|p| p.exists()) {
                return Err(Failure::Config(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn write(&self, name: &str, body: &str) -> Res<()> {
        match self.path(name) {
            Some(p) => write_file(&p, body),
            None => {
                let mut out = std::io::stdout().lock();
                if self.labelled {
                    let _ = writeln!(out, "== {name}");
                }
                out.write_all(body.as_bytes())
                    .map_err(|e| Failure::Runtime(format!("stdout: {e}")))
            }
        }
    }
}

fn write_file(p: &Path, body: &str) -> Res<()> {
    fs::write(p, body).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn cmd_run(a: &RunArgs) -> Res<()> {
    if a.trace && a.common.out.is_none() {
        return Err(Failure::Config("--trace requires --out".into()));
    }
    let base = a.common.base()?;
    let jobs = a.common.jobs(&base)?;
    let sink = Sink::new(&a.common, false)?;
    let mut names = vec!["runs.csv".to_string()];
    for s in &jobs {
        if a.trace {
            names.push(format!("trace-{}-{}.txt", s.mode, s.seed));
        }
        if a.tables {
            names.push(format!("tables-{}-{}.txt", s.mode, s.seed));
        }
    }
    sink.check(&names)?;

    let opts = SimOptions {
        trace_hash: true,
        trace_lines: a.trace,
        record_lookups: false,
    };
    let mut rows = Vec::new();
    if a.tables {
        for s in jobs {
            let (mode, seed, end) = (s.mode, s.seed, s.duration);
            let mut sim = Simulator::new(s, opts)?;
            sim.run_until(end);
            sink.write(&format!("tables-{mode}-{seed}.txt"), &overlay::table_dump(&sim))?;
            let out = sim.finish();
            if a.trace {
                sink.write(&format!("trace-{mode}-{seed}.txt"), &(out.trace.join("\n") + "\n"))?;
            }
            rows.push(out.metrics.csv_row());
        }
    } else {
        for (s, out) in jobs.iter().zip(sweep::run_all(jobs.clone(), opts)) {
            let out = out?;
            if a.trace {
                sink.write(
                    &format!("trace-{}-{}.txt", s.mode, s.seed),
                    &(out.trace.join("\n") + "\n"),
                )?;
            }
            rows.push(out.metrics.csv_row());
        }
    }
    sink.write("runs.csv", &csv(CSV_HEADER, rows))
}

fn cmd_sweep(a: &SweepArgs) -> Res<()> {
    if a.nodes.is_empty() || a.nodes.contains(&0) {
        return Err(Failure::Config("--nodes: expected positive node counts".into()));
    }
    let base = a.common.base()?;
    let seeds = a.common.seeds(&base)?;
    let modes = a.common.modes(&base);
    let sink = Sink::new(&a.common, true)?;
    sink.check(&["runs.csv".into(), "aggregate.csv".into()])?;
    let jobs = sweep::plan(&base, &a.nodes, &modes, &seeds);
    let mut metrics = Vec::new();
    for r in sweep::run_all(jobs, SimOptions::default()) {
        metrics.push(r?.metrics);
    }
    sink.write("runs.csv", &csv(CSV_HEADER, metrics.iter().map(|m| m.csv_row())))?;
    sink.write(
        "aggregate.csv",
        &csv(&sweep::aggregate_header(), sweep::aggregate(&metrics)),
    )
}

fn cmd_dump_overlay(a: &OverlayArgs) -> Res<()> {
    let base = a.common.base()?;
    if !matches!(base.mobility, atr_core::netsim::Mobility::Static) {
        return Err(Failure::Config("mobility: dump-overlay needs a static scenario".into()));
    }
    let seed = a.common.seeds(&base)?[0];
    let at = match a.time {
        Some(t) if t.is_finite() && t >= 0.0 => atr_core::time::from_secs(t),
        Some(t) => return Err(Failure::Config(format!("--time: invalid value {t}"))),
        None => base.duration,
    };
    let modes = match a.common.mode {
        None | Some(ModeArg::Both) => vec![Mode::Atr, Mode::Dart],
        Some(ModeArg::Atr) => vec![Mode::Atr],
        Some(ModeArg::Dart) => vec![Mode::Dart],
    };
    let sink = Sink::new(&a.common, true)?;
    let mut names = vec!["physical.txt".to_string(), "summary.txt".to_string()];
    for m in &modes {
        names.extend([format!("{m}.txt"), format!("{m}-paths.dot"), format!("{m}-tables.txt")]);
    }
    sink.check(&names)?;

    let mut summary = String::new();
    let mut physical_written = false;
    for mode in modes {
        let mut s = base.with_mode(mode);
        s.seed = seed;
        let mut sim = Simulator::new(s, SimOptions::default())?;
        sim.run_until(at);
        if !physical_written {
            let p = overlay::physical(&sim);
            summary.push_str(&format!("physical ones {}\n", p.ones()));
            sink.write("physical.txt", &p.render())?;
            physical_written = true;
        }
        let o = overlay::overlay(&sim);
        summary.push_str(&format!("{mode} ones {}\n", o.ones()));
        for w in overlay::convergence_warnings(&sim) {
            summary.push_str(&format!(
                "warning: {mode} not converged at {}s: {w}\n",
                atr_core::time::to_secs(sim.now())
            ));
        }
        sink.write(&format!("{mode}.txt"), &o.render())?;
        sink.write(&format!("{mode}-paths.dot"), &overlay::paths_dot(&sim))?;
        sink.write(&format!("{mode}-tables.txt"), &overlay::table_dump(&sim))?;
    }
    if summary.contains("warning:") {
        eprint!(
            "{}",
            summary
                .lines()
                .filter(|l| l.starts_with("warning:"))
                .map(|l| format!("{l}\n"))
                .collect::<String>()
        );
    }
    sink.write("summary.txt", &summary)
}

fn cmd_hash(a: &HashArgs) -> Res<()> {
    if !(1..=16).contains(&a.bits) {
        return Err(Failure::Config(format!("--bits: {} outside 1..=16", a.bits)));
    }
    let addr = hash_id(NodeId(a.id), a.bits);
    println!("{addr}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::DumpOverlay(a) => cmd_dump_overlay(a),
        Cmd::Hash(a) => cmd_hash(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
