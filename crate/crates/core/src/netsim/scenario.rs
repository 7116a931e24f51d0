//! Scenario files: flat TOML, every key optional except `nodes`.
//!
//! Unknown keys are rejected. Validation errors name the offending key.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::radio::{radius_for_degree, Point};
use super::traffic::TrafficConfig;
use crate::addressing::{NetAddress, NodeId, MAX_WIDTH};
use crate::allocation::SelectionRule;
use crate::error::ScenarioError;
use crate::forwarding::ForwardConfig;
use crate::lookup::CacheConfig;
use crate::routing::Mode;
use crate::time::{from_secs, Micros};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LookupMode {
    /// Addresses resolved through NAUP/NARQ/NARP over the tree.
    Dht,
    /// Senders read the destination's current address directly.
    Oracle,
}

impl std::fmt::Display for LookupMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LookupMode::Dht => "dht",
            LookupMode::Oracle => "oracle",
        })
    }
}

impl std::str::FromStr for LookupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dht" => Ok(LookupMode::Dht),
            "oracle" => Ok(LookupMode::Oracle),
            _ => Err(format!("unknown lookup mode {s:?} (expected dht or oracle)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MobilityKind {
    Static,
    Rwp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mobility {
    Static,
    RandomWaypoint {
        speed_min: f64,
        speed_max: f64,
        pause_min: f64,
        pause_max: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFailure {
    pub a: usize,
    pub b: usize,
    /// Seconds; the link is down from then on.
    pub at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub src: usize,
    pub dst: usize,
    pub start: f64,
    pub end: f64,
    /// bit/s; defaults to the global load shared over the listed flows.
    pub rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    nodes: Option<usize>,
    address_bits: Option<u8>,
    density: Option<f64>,
    area_width: Option<f64>,
    area_height: Option<f64>,
    radio_radius: Option<f64>,
    mean_degree: Option<f64>,
    mobility: Option<MobilityKind>,
    speed_min: Option<f64>,
    speed_max: Option<f64>,
    pause_min: Option<f64>,
    pause_max: Option<f64>,
    duration: Option<f64>,
    hello_period: Option<f64>,
    expiry_periods: Option<u32>,
    global_load: Option<f64>,
    flow_count: Option<usize>,
    traffic_start: Option<f64>,
    traffic_end: Option<f64>,
    payload_bytes: Option<u32>,
    flows: Option<Vec<FlowSpec>>,
    mode: Option<Mode>,
    selection: Option<SelectionRule>,
    lookup: Option<LookupMode>,
    loss: Option<f64>,
    seed: Option<u64>,
    piggyback: Option<usize>,
    cache_capacity: Option<usize>,
    cache_ttl: Option<f64>,
    publish_period: Option<f64>,
    narq_retries: Option<u8>,
    narq_timeout: Option<f64>,
    ttl: Option<u8>,
    max_retries: Option<u8>,
    invalidation_period: Option<f64>,
    ack_timeout: Option<f64>,
    escalate: Option<bool>,
    link_rate: Option<f64>,
    propagation: Option<f64>,
    sample_period: Option<f64>,
    boot_window: Option<f64>,
    join_timeout: Option<f64>,
    conflict_hold: Option<f64>,
    probation: Option<f64>,
    require_connected: Option<bool>,
    positions: Option<Vec<[f64; 2]>>,
    adjacency: Option<Vec<Vec<u8>>>,
    addresses: Option<Vec<String>>,
    ids: Option<Vec<u32>>,
    link_failures: Option<Vec<LinkFailure>>,
}

/// Fully resolved scenario. Times are in microseconds, lengths in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub nodes: usize,
    pub address_bits: u8,
    pub width: f64,
    pub height: f64,
    pub radio_radius: f64,
    pub mobility: Mobility,
    pub duration: Micros,
    pub hello_period: Micros,
    pub expiry_periods: u32,
    pub traffic: TrafficConfig,
    pub flows: Vec<FlowSpec>,
    pub mode: Mode,
    pub selection: SelectionRule,
    pub lookup: LookupMode,
    pub loss: f64,
    pub seed: u64,
    pub cache: CacheConfig,
    pub publish_period: Micros,
    pub narq_retries: u8,
    pub narq_timeout: Micros,
    pub ttl: u8,
    pub forward: ForwardConfig,
    pub ack_timeout: Micros,
    pub link_rate: f64,
    pub propagation: Micros,
    pub sample_period: Micros,
    pub boot_window: Micros,
    pub join_timeout: Micros,
    pub conflict_hold: Micros,
    pub probation: Micros,
    pub require_connected: bool,
    pub positions: Option<Vec<Point>>,
    pub adjacency: Option<Vec<Vec<bool>>>,
    pub addresses: Option<Vec<NetAddress>>,
    pub ids: Option<Vec<NodeId>>,
    pub link_failures: Vec<LinkFailure>,
}

fn non_negative(key: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(ScenarioError::invalid(
            key,
            format!("must be a finite value >= 0, got {v}"),
        ))
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ScenarioError::invalid(key, format!("must be > 0, got {v}")))
    }
}

fn secs(key: &str, v: Option<f64>, default: f64) -> Result<Micros, ScenarioError> {
    Ok(from_secs(non_negative(key, v.unwrap_or(default))?))
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let raw: ScenarioFile = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match msg.strip_prefix("unknown field `") {
                Some(rest) => {
                    let key = rest.split('`').next().unwrap_or_default();
                    ScenarioError::invalid(key, "unknown key")
                }
                None => ScenarioError::Parse(e.to_string()),
            }
        })?;
        Scenario::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml_str(&text)
    }

    /// A static scenario of `nodes` nodes with every other key at its default.
    pub fn with_nodes(nodes: usize) -> Scenario {
        Scenario::resolve(ScenarioFile {
            nodes: Some(nodes),
            ..ScenarioFile::default()
        })
        .expect("defaults are valid")
    }

    fn resolve(f: ScenarioFile) -> Result<Scenario, ScenarioError> {
        let nodes = f.nodes.ok_or_else(|| ScenarioError::invalid("nodes", "missing"))?;
        if nodes == 0 {
            return Err(ScenarioError::invalid("nodes", "must be at least 1"));
        }
        let address_bits = f.address_bits.unwrap_or(8);
        if !(3..=MAX_WIDTH).contains(&address_bits) {
            return Err(ScenarioError::invalid("address_bits", "must be in 3..=16"));
        }
        if nodes > 1usize << address_bits {
            return Err(ScenarioError::invalid(
                "nodes",
                format!("{nodes} nodes do not fit in {address_bits}-bit addresses"),
            ));
        }

        let density = positive("density", f.density.unwrap_or(64.0))?;
        let (width, height) = match (f.area_width, f.area_height) {
            (Some(w), Some(h)) => (positive("area_width", w)?, positive("area_height", h)?),
            (None, None) => {
                let side = (nodes as f64 / density).sqrt() * 1000.0;
                (side, side)
            }
            (Some(_), None) => return Err(ScenarioError::invalid("area_height", "missing")),
            (None, Some(_)) => return Err(ScenarioError::invalid("area_width", "missing")),
        };
        let radio_radius = match f.radio_radius {
            Some(r) => non_negative("radio_radius", r)?,
            None => {
                let effective = nodes as f64 / (width * height / 1e6);
                radius_for_degree(effective, f.mean_degree.unwrap_or(12.0))?
            }
        };

        let mobility = match f.mobility.unwrap_or(MobilityKind::Static) {
            MobilityKind::Static => Mobility::Static,
            MobilityKind::Rwp => {
                let speed_min = positive("speed_min", f.speed_min.unwrap_or(0.5))?;
                let speed_max = positive("speed_max", f.speed_max.unwrap_or(5.0))?;
                if speed_max < speed_min {
                    return Err(ScenarioError::invalid("speed_max", "below speed_min"));
                }
                let pause_min = non_negative("pause_min", f.pause_min.unwrap_or(0.0))?;
                let pause_max = non_negative("pause_max", f.pause_max.unwrap_or(100.0))?;
                if pause_max < pause_min {
                    return Err(ScenarioError::invalid("pause_max", "below pause_min"));
                }
                Mobility::RandomWaypoint {
                    speed_min,
                    speed_max,
                    pause_min,
                    pause_max,
                }
            }
        };

        let hello_secs = positive("hello_period", f.hello_period.unwrap_or(1.0))?;
        let hello_period = from_secs(hello_secs);
        let expiry_periods = f.expiry_periods.unwrap_or(3);
        if expiry_periods == 0 {
            return Err(ScenarioError::invalid("expiry_periods", "must be at least 1"));
        }
        let duration = secs("duration", f.duration, 750.0)?;

        let traffic = TrafficConfig {
            global_load: non_negative("global_load", f.global_load.unwrap_or(250_000.0))?,
            flow_count: f.flow_count.unwrap_or(10),
            start: non_negative("traffic_start", f.traffic_start.unwrap_or(450.0))?,
            end: non_negative("traffic_end", f.traffic_end.unwrap_or(720.0))?,
            payload_bytes: f.payload_bytes.unwrap_or(512),
        };
        if traffic.end < traffic.start {
            return Err(ScenarioError::invalid("traffic_end", "before traffic_start"));
        }
        if traffic.flow_count > 0 && traffic.global_load == 0.0 && f.flows.is_none() {
            return Err(ScenarioError::invalid(
                "global_load",
                "must be > 0 when flows are generated",
            ));
        }
        if traffic.payload_bytes == 0 {
            return Err(ScenarioError::invalid("payload_bytes", "must be > 0"));
        }
        let flows = f.flows.unwrap_or_default();
        for fl in &flows {
            if fl.src >= nodes || fl.dst >= nodes {
                return Err(ScenarioError::invalid("flows", "endpoint out of range"));
            }
            if fl.src == fl.dst {
                return Err(ScenarioError::invalid("flows", "endpoints must be distinct"));
            }
            if non_negative("flows", fl.start)? >= non_negative("flows", fl.end)? {
                return Err(ScenarioError::invalid("flows", "start must precede end"));
            }
            if let Some(r) = fl.rate {
                positive("flows", r)?;
            }
        }

        let mode = f.mode.unwrap_or(Mode::Atr);
        let selection = f.selection.unwrap_or(match mode {
            Mode::Atr => SelectionRule::Atr,
            Mode::Dart => SelectionRule::Dart,
        });
        let loss = non_negative("loss", f.loss.unwrap_or(0.0))?;
        if loss > 1.0 {
            return Err(ScenarioError::invalid("loss", "must be a probability"));
        }

        let cache = CacheConfig {
            capacity: f.cache_capacity.unwrap_or(128),
            ttl: secs("cache_ttl", f.cache_ttl, 20.0)?,
            piggyback: f.piggyback.unwrap_or(4),
        };
        let ttl = f.ttl.unwrap_or(4 * address_bits);
        if ttl == 0 {
            return Err(ScenarioError::invalid("ttl", "must be at least 1"));
        }
        let forward = ForwardConfig {
            escalate: f.escalate.unwrap_or(true),
            max_retries: f.max_retries.unwrap_or(3),
            invalidation_period: secs("invalidation_period", f.invalidation_period, 2.0)?,
        };
        let link_rate = positive("link_rate", f.link_rate.unwrap_or(6e6))?;

        let positions = match f.positions {
            None => None,
            Some(p) => {
                if p.len() != nodes {
                    return Err(ScenarioError::invalid("positions", "need one entry per node"));
                }
                let pts: Vec<Point> = p.iter().map(|[x, y]| Point::new(*x, *y)).collect();
                if pts
                    .iter()
                    .any(|q| !(0.0..=width).contains(&q.x) || !(0.0..=height).contains(&q.y))
                {
                    return Err(ScenarioError::invalid("positions", "outside the area"));
                }
                Some(pts)
            }
        };
        let adjacency = match f.adjacency {
            None => None,
            Some(m) => {
                if m.len() != nodes || m.iter().any(|r| r.len() != nodes) {
                    return Err(ScenarioError::invalid("adjacency", "must be an n x n matrix"));
                }
                for (i, row) in m.iter().enumerate() {
                    if row[i] != 0 {
                        return Err(ScenarioError::invalid("adjacency", "diagonal must be 0"));
                    }
                    for (j, v) in row.iter().enumerate() {
                        if *v > 1 || *v != m[j][i] {
                            return Err(ScenarioError::invalid("adjacency", "must be a symmetric 0/1 matrix"));
                        }
                    }
                }
                if mobility != Mobility::Static {
                    return Err(ScenarioError::invalid("adjacency", "requires static mobility"));
                }
                Some(m.iter().map(|r| r.iter().map(|v| *v == 1).collect()).collect())
            }
        };
        let addresses = match f.addresses {
            None => None,
            Some(a) => {
                if a.len() != nodes {
                    return Err(ScenarioError::invalid("addresses", "need one entry per node"));
                }
                let parsed: Result<Vec<NetAddress>, _> = a
                    .iter()
                    .map(|s| NetAddress::parse_with_width(s, address_bits))
                    .collect();
                Some(parsed.map_err(|e| ScenarioError::invalid("addresses", e.to_string()))?)
            }
        };
        let ids = match f.ids {
            None => None,
            Some(v) => {
                if v.len() != nodes {
                    return Err(ScenarioError::invalid("ids", "need one entry per node"));
                }
                let mut sorted = v.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != v.len() {
                    return Err(ScenarioError::invalid("ids", "must be distinct"));
                }
                Some(v.into_iter().map(NodeId).collect())
            }
        };
        let link_failures = f.link_failures.unwrap_or_default();
        for lf in &link_failures {
            if lf.a >= nodes || lf.b >= nodes || lf.a == lf.b {
                return Err(ScenarioError::invalid("link_failures", "bad endpoints"));
            }
            non_negative("link_failures", lf.at)?;
        }

        let conflict_hold = secs("conflict_hold", f.conflict_hold, f64::from(expiry_periods) * hello_secs)?;
        Ok(Scenario {
            name: f.name.unwrap_or_default(),
            nodes,
            address_bits,
            width,
            height,
            radio_radius,
            mobility,
            duration,
            hello_period,
            expiry_periods,
            traffic,
            flows,
            mode,
            selection,
            lookup: f.lookup.unwrap_or(LookupMode::Dht),
            loss,
            seed: f.seed.unwrap_or(1),
            cache,
            publish_period: secs("publish_period", f.publish_period, 10.0 * hello_secs)?,
            narq_retries: f.narq_retries.unwrap_or(2),
            narq_timeout: secs("narq_timeout", f.narq_timeout, 1.0)?,
            ttl,
            forward,
            ack_timeout: secs("ack_timeout", f.ack_timeout, 0.05)?,
            link_rate,
            propagation: secs("propagation", f.propagation, 1e-6)?,
            sample_period: from_secs(positive("sample_period", f.sample_period.unwrap_or(5.0))?),
            boot_window: secs("boot_window", f.boot_window, 0.0)?,
            join_timeout: secs("join_timeout", f.join_timeout, 3.0 * hello_secs)?,
            conflict_hold,
            probation: secs("probation", f.probation, 2.0 * crate::time::to_secs(conflict_hold))?,
            require_connected: f.require_connected.unwrap_or(false),
            positions,
            adjacency,
            addresses,
            ids,
            link_failures,
        })
    }

    /// Area in km².
    pub fn area_km2(&self) -> f64 {
        self.width * self.height / 1e6
    }

    /// Same scenario with `n` nodes over an area rescaled to keep the density.
    pub fn scaled_to(&self, n: usize) -> Scenario {
        let density = self.nodes as f64 / self.area_km2();
        let side = (n as f64 / density).sqrt() * 1000.0;
        let mut s = self.clone();
        s.nodes = n;
        s.width = side;
        s.height = side;
        s.positions = None;
        s.adjacency = None;
        s.addresses = None;
        s.ids = None;
        s.flows.retain(|f| f.src < n && f.dst < n);
        s.link_failures.retain(|l| l.a < n && l.b < n);
        s
    }

    /// Same scenario in `mode`, with the join rule that belongs to it.
    pub fn with_mode(&self, mode: Mode) -> Scenario {
        let mut s = self.clone();
        s.mode = mode;
        s.selection = match mode {
            Mode::Atr => SelectionRule::Atr,
            Mode::Dart => SelectionRule::Dart,
        };
        s
    }

    pub fn hello_max_age(&self) -> Micros {
        self.hello_period * u64::from(self.expiry_periods)
    }

    /// Hex SHA-256 of the scenario with the per-run fields (seed, mode,
    /// selection, lookup) blanked out.
    pub fn content_hash(&self) -> String {
        let mut s = self.clone();
        s.seed = 0;
        s.mode = Mode::Atr;
        s.selection = SelectionRule::Atr;
        s.lookup = LookupMode::Dht;
        let digest = Sha256::digest(format!("{s:?}").as_bytes());
        hex::encode(&digest[..8])
    }
}
