//! Unit-disk radio: geometry, connectivity and per-hop latency.

use crate::error::ScenarioError;
use crate::time::Micros;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Radius (m) giving `degree` expected neighbours at `density` nodes/km².
pub fn radius_for_degree(density: f64, degree: f64) -> Result<f64, ScenarioError> {
    if density.is_nan() || density <= 0.0 {
        return Err(ScenarioError::invalid("density", "must be positive"));
    }
    if degree.is_nan() || degree < 0.0 {
        return Err(ScenarioError::invalid("mean_degree", "must be non-negative"));
    }
    let km = (degree / (std::f64::consts::PI * density)).sqrt();
    Ok(km * 1000.0)
}

pub fn in_range(a: Point, b: Point, radius: f64) -> bool {
    a.dist(b) <= radius
}

/// Adjacency lists of the unit-disk graph, neighbours in index order.
pub fn unit_disk(points: &[Point], radius: f64) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            (0..points.len())
                .filter(|&j| j != i && in_range(points[i], points[j], radius))
                .collect()
        })
        .collect()
}

pub fn is_connected(adj: &[Vec<usize>]) -> bool {
    adj.is_empty() || crate::metrics::bfs_distances(adj, 0).iter().all(Option::is_some)
}

pub fn mean_degree(adj: &[Vec<usize>]) -> f64 {
    if adj.is_empty() {
        return 0.0;
    }
    adj.iter().map(Vec::len).sum::<usize>() as f64 / adj.len() as f64
}

/// Propagation plus serialization of `bytes` at `link_rate` bit/s.
pub fn latency(bytes: usize, link_rate: f64, propagation: Micros) -> Micros {
    let serial = (bytes as f64 * 8.0 / link_rate * 1e6).ceil() as Micros;
    propagation + serial
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::rng::{substream, Purpose};
    use rand::Rng;

    #[test]
    fn radius_examples() {
        let r = radius_for_degree(64.0, 12.0).unwrap();
        assert!((r - 244.3).abs() < 0.05, "{r}");
        assert_eq!(radius_for_degree(64.0, 0.0).unwrap(), 0.0);
        let r2 = radius_for_degree(128.0, 12.0).unwrap();
        assert!((r2 - r / 2f64.sqrt()).abs() < 1e-9);
        assert!(radius_for_degree(64.0, -1.0).is_err());
        assert!(radius_for_degree(0.0, 12.0).is_err());
    }

    #[test]
    fn uniform_placement_reaches_target_degree() {
        // Large field so border effects stay small.
        let n = 2000;
        let side = (n as f64 / 64.0).sqrt() * 1000.0;
        let r = radius_for_degree(64.0, 12.0).unwrap();
        let mut rng = substream(3, Purpose::Placement, 0);
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side)))
            .collect();
        let d = mean_degree(&unit_disk(&pts, r));
        assert!((d - 12.0).abs() <= 1.0, "{d}");
    }

    #[test]
    fn disk_boundary() {
        let r = 100.0;
        let a = Point::new(0.0, 0.0);
        assert!(in_range(a, Point::new(r - 1e-9, 0.0), r));
        assert!(!in_range(a, Point::new(r + 1e-9, 0.0), r));
    }

    #[test]
    fn spaced_line_is_a_path() {
        let r = 100.0;
        let pts: Vec<Point> = (0..6).map(|i| Point::new(0.9 * r * i as f64, 0.0)).collect();
        let adj = unit_disk(&pts, r);
        for (i, nb) in adj.iter().enumerate() {
            let expect: Vec<usize> = [i.checked_sub(1), (i + 1 < 6).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            assert_eq!(nb, &expect);
        }
        for (i, nb) in adj.iter().enumerate() {
            for j in nb {
                assert!(adj[*j].contains(&i));
            }
        }
    }

    #[test]
    fn latency_at_six_megabit() {
        assert_eq!(latency(75, 6e6, 1), 101);
        assert_eq!(latency(0, 6e6, 1), 1);
    }
}
