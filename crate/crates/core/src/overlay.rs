//! Overlay views of a running simulation: the physical adjacency matrix, the
//! next-hop overlay each protocol builds on top of it, per-destination
//! next-hop graphs and table dumps.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::addressing::sibling_level;
use crate::netsim::Simulator;

/// Square 0/1 matrix, one row per node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matrix(pub Vec<Vec<u8>>);

impl Matrix {
    pub fn ones(&self) -> usize {
        self.0.iter().flatten().filter(|x| **x == 1).count()
    }

    /// One line per node, entries separated by single spaces.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for row in &self.0 {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn physical(sim: &Simulator) -> Matrix {
    let n = sim.node_count();
    let mut m = vec![vec![0u8; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for j in sim.neighbors(i) {
            row[j] = 1;
        }
    }
    Matrix(m)
}

/// Neighbours of `i` that appear as a next hop anywhere in its table.
/// A next-hop address held by several neighbours marks all of them.
fn next_hop_neighbours(sim: &Simulator, i: usize) -> BTreeSet<usize> {
    let Some(table) = sim.table(i) else {
        return BTreeSet::new();
    };
    let hops: BTreeSet<_> = table.next_hops().into_iter().collect();
    sim.neighbors(i)
        .into_iter()
        .filter(|&j| sim.address(j).is_some_and(|a| hops.contains(&a)))
        .collect()
}

/// Overlay built by the simulator's protocol mode: entry (i, j) is 1 when
/// node i uses neighbour j as a next hop. Rows are directed.
pub fn overlay(sim: &Simulator) -> Matrix {
    let n = sim.node_count();
    let mut m = vec![vec![0u8; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for j in next_hop_neighbours(sim, i) {
            row[j] = 1;
        }
    }
    Matrix(m)
}

/// Directed next-hop edges toward `dst`: every node other than `dst` points
/// at each next hop it holds for the sibling containing `dst`.
pub fn path_edges(sim: &Simulator, dst: usize) -> Vec<(usize, usize)> {
    let Some(target) = sim.address(dst) else {
        return Vec::new();
    };
    let mut edges = Vec::new();
    for i in 0..sim.node_count() {
        let (Some(table), Some(own)) = (sim.table(i), sim.address(i)) else {
            continue;
        };
        let Ok(level) = sibling_level(own, target) else {
            continue;
        };
        let hops: BTreeSet<_> = table.entries(level).iter().map(|e| e.next_hop).collect();
        for j in sim.neighbors(i) {
            if sim.address(j).is_some_and(|a| hops.contains(&a)) {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn label(sim: &Simulator, i: usize) -> String {
    sim.address(i).map_or_else(|| format!("n{i}"), |a| a.to_string())
}

/// Graphviz description of the next-hop graph toward every addressed node.
pub fn paths_dot(sim: &Simulator) -> String {
    let mut s = String::new();
    let mode = sim.scenario().mode;
    for dst in 0..sim.node_count() {
        if sim.address(dst).is_none() {
            continue;
        }
        let _ = writeln!(s, "digraph \"{mode} dst {}\" {{", label(sim, dst));
        let _ = writeln!(s, "  \"{}\" [shape=doublecircle];", label(sim, dst));
        for (i, j) in path_edges(sim, dst) {
            let _ = writeln!(s, "  \"{}\" -> \"{}\";", label(sim, i), label(sim, j));
        }
        s.push_str("}\n");
    }
    s
}

/// Every node's routing table in the tabular text layout.
pub fn table_dump(sim: &Simulator) -> String {
    let mut s = String::new();
    for i in 0..sim.node_count() {
        let _ = writeln!(s, "node {i} id {} addr {}", sim.id(i).0, label(sim, i));
        if let Some(t) = sim.table(i) {
            s.push_str(&t.render());
        }
        s.push('\n');
    }
    s
}

/// Reasons the current state should not be read as converged: unaddressed
/// nodes, shared addresses, or an allocation event within the last expiry
/// window.
pub fn convergence_warnings(sim: &Simulator) -> Vec<String> {
    let mut w = Vec::new();
    let addrs: Vec<_> = (0..sim.node_count()).map(|i| sim.address(i)).collect();
    let unaddressed = addrs.iter().filter(|a| a.is_none()).count();
    if unaddressed > 0 {
        w.push(format!("{unaddressed} node(s) unaddressed"));
    }
    let distinct: BTreeSet<_> = addrs.iter().flatten().collect();
    let shared = addrs.iter().flatten().count() - distinct.len();
    if shared > 0 {
        w.push(format!("{shared} duplicate address(es)"));
    }
    let c = sim.metrics();
    if let Some(last) = c.last_duplicate.max(c.last_invalid) {
        if sim.now().saturating_sub(last) <= sim.scenario().hello_max_age() {
            w.push("allocation event within the last expiry window".to_string());
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{Scenario, SimOptions};

    fn mesh(mode: &str) -> Simulator {
        let src = format!(
            "nodes = 4\naddress_bits = 3\nmode = \"{mode}\"\nlookup = \"oracle\"\nflow_count = 0\nduration = 10.0\n\
             adjacency = [[0,1,1,1],[1,0,1,1],[1,1,0,1],[1,1,1,0]]\n\
             addresses = [\"000\", \"001\", \"010\", \"100\"]\nids = [1, 4, 3, 2]\n"
        );
        let mut sim = Simulator::new(Scenario::from_toml_str(&src).unwrap(), SimOptions::default()).unwrap();
        sim.run_until(5_000_000);
        sim
    }

    #[test]
    fn atr_overlay_is_the_physical_graph() {
        let sim = mesh("atr");
        assert_eq!(overlay(&sim), physical(&sim));
        assert!(convergence_warnings(&sim).is_empty());
    }

    #[test]
    fn dart_mesh_misses_edges_and_routes_indirectly() {
        let sim = mesh("dart");
        let o = overlay(&sim);
        assert!(o.ones() < physical(&sim).ones());
        // In a full mesh any edge not ending at the destination is a detour.
        // Node 100 keeps one entry for 0XX, the tie-broken 000, so it
        // reaches 010 through 000.
        assert!(path_edges(&sim, 2).contains(&(3, 0)));
        assert!(!path_edges(&sim, 2).contains(&(3, 2)));
        let atr = mesh("atr");
        for dst in 0..4 {
            let edges = path_edges(&atr, dst);
            assert!((0..4).filter(|&i| i != dst).all(|i| edges.contains(&(i, dst))));
        }
    }

    #[test]
    fn render_is_row_per_node() {
        let m = Matrix(vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(m.render(), "0 1\n1 0\n");
        assert_eq!(m.ones(), 2);
    }

    #[test]
    fn dot_names_every_destination() {
        let dot = paths_dot(&mesh("atr"));
        assert_eq!(dot.matches("digraph").count(), 4);
        assert!(dot.contains("\"001\" -> \"000\";"));
    }
}
