//! Random waypoint motion as piecewise-linear legs.

use rand::Rng;

use super::radio::Point;
use crate::time::{from_secs, Micros};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RwpParams {
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_min: f64,
    pub pause_max: f64,
    pub width: f64,
    pub height: f64,
}

/// Wait at `from` until `depart`, then move straight to `to`, arriving at `arrive`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leg {
    pub from: Point,
    pub to: Point,
    pub depart: Micros,
    pub arrive: Micros,
    pub speed: f64,
}

impl Leg {
    pub fn stationary(p: Point) -> Self {
        Leg {
            from: p,
            to: p,
            depart: 0,
            arrive: 0,
            speed: 0.0,
        }
    }

    pub fn position(&self, t: Micros) -> Point {
        if t <= self.depart {
            return self.from;
        }
        if t >= self.arrive {
            return self.to;
        }
        let f = (t - self.depart) as f64 / (self.arrive - self.depart) as f64;
        Point::new(
            self.from.x + f * (self.to.x - self.from.x),
            self.from.y + f * (self.to.y - self.from.y),
        )
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Next leg after arriving at `from` at `now`: pause, then a uniform
/// destination in the area at a uniform speed.
pub fn rwp_step(p: &RwpParams, from: Point, now: Micros, rng: &mut impl Rng) -> Leg {
    let pause = uniform(rng, p.pause_min, p.pause_max);
    let to = Point::new(uniform(rng, 0.0, p.width), uniform(rng, 0.0, p.height));
    let speed = uniform(rng, p.speed_min, p.speed_max);
    let depart = now + from_secs(pause);
    let travel = if speed > 0.0 { from.dist(to) / speed } else { 0.0 };
    Leg {
        from,
        to,
        depart,
        arrive: depart + from_secs(travel).max(1),
        speed,
    }
}
