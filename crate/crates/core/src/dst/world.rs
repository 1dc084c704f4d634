//! Planar toy worlds: an ego vehicle, static walls, and moving boxes.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    /// World point expressed in this pose's frame as (forward, left).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Local (forward, left) point in world coordinates.
    pub fn to_world(&self, f: f64, l: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * f - s * l, self.y + s * f + c * l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

impl Segment {
    pub fn new(a: (f64, f64), b: (f64, f64)) -> Self {
        Segment { a, b }
    }

    /// Distance along the unit ray `origin + t·dir` to this segment.
    pub fn intersect(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<f64> {
        let e = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let denom = dir.0 * e.1 - dir.1 * e.0;
        if denom.abs() < 1e-12 {
            return None;
        }
        let w = (self.a.0 - origin.0, self.a.1 - origin.1);
        let t = (w.0 * e.1 - w.1 * e.0) / denom;
        let s = (w.0 * dir.1 - w.1 * dir.0) / denom;
        (t > 1e-9 && (0.0..=1.0).contains(&s)).then_some(t)
    }
}

/// An oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxShape {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl BoxShape {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let pose = Pose {
            x: self.cx,
            y: self.cy,
            theta: self.heading,
        };
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [
            pose.to_world(hl, hw),
            pose.to_world(-hl, hw),
            pose.to_world(-hl, -hw),
            pose.to_world(hl, -hw),
        ]
    }

    pub fn edges(&self) -> [Segment; 4] {
        let c = self.corners();
        [
            Segment::new(c[0], c[1]),
            Segment::new(c[1], c[2]),
            Segment::new(c[2], c[3]),
            Segment::new(c[3], c[0]),
        ]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let pose = Pose {
            x: self.cx,
            y: self.cy,
            theta: self.heading,
        };
        let (f, l) = pose.to_local(x, y);
        f.abs() <= self.length / 2.0 && l.abs() <= self.width / 2.0
    }

    /// Whether the box and the convex quadrilateral `quad` share interior
    /// area. Separating-axis test over the edge normals of both shapes.
    pub fn overlaps(&self, quad: &[(f64, f64); 4]) -> bool {
        let own = self.corners();
        let normals = |c: &[(f64, f64); 4]| {
            [0, 1].map(|i| {
                let (a, b) = (c[i], c[i + 1]);
                (a.1 - b.1, b.0 - a.0)
            })
        };
        let project = |c: &[(f64, f64); 4], n: (f64, f64)| {
            c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p.0 * n.0 + p.1 * n.1;
                (lo.min(d), hi.max(d))
            })
        };
        normals(&own).into_iter().chain(normals(quad)).all(|n| {
            let (a, b) = (project(&own, n), project(quad, n));
            a.1 > b.0 && b.1 > a.0
        })
    }
}

/// A box moving at constant speed along its heading, optionally turning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mover {
    pub id: u32,
    pub shape: BoxShape,
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Ego yaw rate applied during `[start, end)` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Turn {
    pub start: f64,
    pub end: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub ego: Pose,
    pub ego_speed: f64,
    pub turns: Vec<Turn>,
    pub walls: Vec<Segment>,
    pub movers: Vec<Mover>,
    pub time: f64,
    /// Axis-aligned world limits `(x_min, x_max, y_min, y_max)`.
    pub bounds: (f64, f64, f64, f64),
}

impl World {
    pub fn empty() -> Self {
        World {
            ego: Pose::default(),
            ego_speed: 0.0,
            turns: Vec::new(),
            walls: Vec::new(),
            movers: Vec::new(),
            time: 0.0,
            bounds: (-200.0, 200.0, -200.0, 200.0),
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (x0, x1, y0, y1) = self.bounds;
        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
    }

    /// Advances by `dt` seconds. Fails if the ego or a mover leaves the bounds.
    pub fn advance(&mut self, dt: f64) -> Result<()> {
        let yaw = self
            .turns
            .iter()
            .filter(|t| self.time >= t.start && self.time < t.end)
            .map(|t| t.yaw_rate)
            .sum::<f64>();
        let ego = &mut self.ego;
        ego.x += self.ego_speed * dt * ego.theta.cos();
        ego.y += self.ego_speed * dt * ego.theta.sin();
        ego.theta += yaw * dt;
        for m in &mut self.movers {
            let s = &mut m.shape;
            s.cx += m.speed * dt * s.heading.cos();
            s.cy += m.speed * dt * s.heading.sin();
            s.heading += m.yaw_rate * dt;
        }
        self.time += dt;
        if !self.inside(self.ego.x, self.ego.y) {
            return Err(Error::config("ego left the world bounds"));
        }
        if let Some(m) = self.movers.iter().find(|m| !self.inside(m.shape.cx, m.shape.cy)) {
            return Err(Error::config(format!("object {} left the world bounds", m.id)));
        }
        Ok(())
    }

    /// Every segment a ray can hit.
    pub fn obstacles(&self) -> Vec<Segment> {
        let mut segs = self.walls.clone();
        for m in &self.movers {
            segs.extend(m.shape.edges());
        }
        segs
    }

    /// First hit along world direction `angle` from the ego, within `max_range`.
    pub fn cast(&self, obstacles: &[Segment], angle: f64, max_range: f64) -> Option<f64> {
        let dir = (angle.cos(), angle.sin());
        obstacles
            .iter()
            .filter_map(|s| s.intersect((self.ego.x, self.ego.y), dir))
            .filter(|&t| t <= max_range)
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Ego drives between walls while a vehicle approaches in the other lane.
    StraightPass,
    /// Ego turns left at a four-way junction as a vehicle crosses.
    Intersection,
    /// Stationary ego among random static obstacles.
    StaticClutter,
    /// Stationary ego; one vehicle crosses in front.
    Crossing,
    /// Ego drives in open space; a faster vehicle passes on the left.
    Overtake,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::StraightPass,
        Scenario::Intersection,
        Scenario::StaticClutter,
        Scenario::Crossing,
        Scenario::Overtake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::StraightPass => "straight-pass",
            Scenario::Intersection => "intersection",
            Scenario::StaticClutter => "static-clutter",
            Scenario::Crossing => "crossing",
            Scenario::Overtake => "overtake",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}")))
    }

    /// Scenario with a single moving vehicle and no walls near its path.
    pub fn is_scripted_single_mover(self) -> bool {
        matches!(self, Scenario::StraightPass | Scenario::Crossing | Scenario::Overtake)
    }

    /// Samples a world for this scenario.
    pub fn build<R: Rng>(self, rng: &mut R) -> World {
        let mut world = World::empty();
        let car = |id, cx, cy, heading, speed| Mover {
            id,
            shape: BoxShape {
                cx,
                cy,
                length: 4.0,
                width: 1.8,
                heading,
            },
            speed,
            yaw_rate: 0.0,
        };
        match self {
            Scenario::StraightPass => {
                world.ego_speed = rng.random_range(3.0..5.0);
                let half = rng.random_range(4.5..5.0);
                world.walls.push(Segment::new((-50.0, half), (150.0, half)));
                world.walls.push(Segment::new((-50.0, -half), (150.0, -half)));
                world.movers.push(car(
                    1,
                    rng.random_range(6.5..8.0),
                    rng.random_range(2.2..2.6),
                    PI,
                    rng.random_range(3.0..5.0),
                ));
            }
            Scenario::Intersection => {
                world.ego_speed = rng.random_range(3.0..4.0);
                let cx = rng.random_range(7.0..9.0);
                let road = 4.0;
                // Four building corners around the junction at (cx, 0).
                for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let corner = (cx + sx * road, sy * road);
                    world.walls.push(Segment::new(corner, (corner.0 + sx * 40.0, corner.1)));
                    world.walls.push(Segment::new(corner, (corner.0, corner.1 + sy * 40.0)));
                }
                let t_turn = cx / world.ego_speed;
                let duration = rng.random_range(1.6..2.2);
                world.turns.push(Turn {
                    start: t_turn - duration / 2.0,
                    end: t_turn + duration / 2.0,
                    yaw_rate: FRAC_PI_2 / duration,
                });
                world.movers.push(car(
                    1,
                    cx + 2.0,
                    rng.random_range(-14.0..-10.0),
                    FRAC_PI_2,
                    rng.random_range(3.0..5.0),
                ));
            }
            Scenario::StaticClutter => {
                let n = rng.random_range(6..10);
                let mut placed = 0;
                while placed < n {
                    let x: f64 = rng.random_range(-5.0..5.0);
                    let y: f64 = rng.random_range(-5.0..5.0);
                    if x.abs() < 1.5 && y.abs() < 1.5 {
                        continue;
                    }
                    let shape = BoxShape {
                        cx: x,
                        cy: y,
                        length: rng.random_range(0.4..1.5),
                        width: rng.random_range(0.4..1.5),
                        heading: rng.random_range(0.0..PI),
                    };
                    world.walls.extend(shape.edges());
                    placed += 1;
                }
            }
            Scenario::Crossing => {
                let x = rng.random_range(3.0..4.0);
                world.movers.push(car(
                    1,
                    x,
                    rng.random_range(-6.0..-5.0),
                    FRAC_PI_2,
                    rng.random_range(3.0..4.0),
                ));
            }
            Scenario::Overtake => {
                world.ego_speed = rng.random_range(2.0..3.0);
                world.movers.push(car(
                    1,
                    rng.random_range(-5.5..-4.5),
                    rng.random_range(2.4..2.8),
                    0.0,
                    world.ego_speed + rng.random_range(2.5..3.5),
                ));
            }
        }
        world
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trip() {
        let p = Pose {
            x: 1.0,
            y: -2.0,
            theta: 0.7,
        };
        let (f, l) = p.to_local(3.0, 4.0);
        let (x, y) = p.to_world(f, l);
        assert!((x - 3.0).abs() < 1e-12 && (y - 4.0).abs() < 1e-12);
    }

    #[test]
    fn perpendicular_wall_hit() {
        let s = Segment::new((2.0, -1.0), (2.0, 1.0));
        assert!((s.intersect((0.0, 0.0), (1.0, 0.0)).unwrap() - 2.0).abs() < 1e-12);
        assert!(s.intersect((0.0, 0.0), (-1.0, 0.0)).is_none());
    }

    #[test]
    fn leaving_bounds_fails() {
        let mut w = World::empty();
        w.bounds = (-1.0, 1.0, -1.0, 1.0);
        w.ego_speed = 5.0;
        assert!(w.advance(0.1).is_ok());
        assert!(w.advance(0.2).is_err());
    }

    #[test]
    fn scenario_names_parse() {
        for s in Scenario::ALL {
            assert_eq!(Scenario::parse(s.name()).unwrap(), s);
        }
        assert!(Scenario::parse("highway").is_err());
    }
}
