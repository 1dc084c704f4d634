//! 2-D LiDAR ray casting and the inverse sensor model.
//!
//! Grids are ego-centric: row 0 is farthest ahead, column 0 farthest left,
//! and the ego sits at the center of cell `(h/2, w/2)`.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::masses::{BeliefGrid, Mass};
use super::world::World;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    /// Meters per cell.
    pub resolution: f64,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, resolution: f64) -> Result<Self> {
        if h == 0 || w == 0 || !(resolution > 0.0) {
            return Err(Error::config(format!(
                "grid {h}×{w} at {resolution} m per cell is degenerate"
            )));
        }
        Ok(GridSpec { h, w, resolution })
    }

    /// Continuous grid coordinates `(u, v)` of an ego-frame point; the cell
    /// is `(floor(u), floor(v))`.
    pub fn to_grid(&self, forward: f64, left: f64) -> (f64, f64) {
        (
            (self.h / 2) as f64 + 0.5 - forward / self.resolution,
            (self.w / 2) as f64 + 0.5 - left / self.resolution,
        )
    }

    /// Ego-frame center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            ((self.h / 2) as f64 - row as f64) * self.resolution,
            ((self.w / 2) as f64 - col as f64) * self.resolution,
        )
    }

    pub fn cell_of(&self, forward: f64, left: f64) -> Option<(usize, usize)> {
        let (u, v) = self.to_grid(forward, left);
        let (r, c) = (u.floor(), v.floor());
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.h && (c as usize) < self.w).then(|| (r as usize, c as usize))
    }

    pub fn ego_cell(&self) -> (usize, usize) {
        (self.h / 2, self.w / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub rays: usize,
    pub max_range: f64,
    /// Standard deviation of additive range noise in meters.
    pub range_noise: f64,
    pub p_occ: f64,
    pub p_free: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            rays: 720,
            max_range: 8.0,
            range_noise: 0.0,
            p_occ: 0.7,
            p_free: 0.6,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays == 0 || !(self.max_range > 0.0) || self.range_noise < 0.0 {
            return Err(Error::config("sensor needs rays, a positive range and nonnegative noise"));
        }
        for (name, p) in [("p_occ", self.p_occ), ("p_free", self.p_free)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a mass")));
            }
        }
        Ok(())
    }
}

/// Outcome of traversing one ray.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RayCells {
    /// Cells passed through before the hit, in order.
    pub free: Vec<(usize, usize)>,
    /// Cell containing the hit, when it lies on the grid.
    pub hit: Option<(usize, usize)>,
}

/// Walks the cells crossed by the ego-frame ray at `angle` (radians, 0 =
/// forward, positive = left) out to `length` meters, stopping at the grid
/// edge. With `hit` the final cell is reported as the hit cell.
pub fn traverse(spec: &GridSpec, angle: f64, length: f64, hit: bool) -> RayCells {
    let (u0, v0) = spec.to_grid(0.0, 0.0);
    let du = -angle.cos() / spec.resolution;
    let dv = -angle.sin() / spec.resolution;
    let mut r = u0.floor() as i64;
    let mut c = v0.floor() as i64;
    let axis = |p0: f64, d: f64, cell: i64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, ((cell + 1) as f64 - p0) / d, 1.0 / d)
        } else if d < 0.0 {
            (-1, (cell as f64 - p0) / d, -1.0 / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_r, mut t_r, dt_r) = axis(u0, du, r);
    let (step_c, mut t_c, dt_c) = axis(v0, dv, c);
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < spec.h && (c as usize) < spec.w;
    let mut out = RayCells {
        free: Vec::new(),
        hit: None,
    };
    while inside(r, c) {
        let exit = t_r.min(t_c);
        let cell = (r as usize, c as usize);
        if length <= exit {
            if hit {
                out.hit = Some(cell);
            } else {
                out.free.push(cell);
            }
            break;
        }
        out.free.push(cell);
        if t_r < t_c {
            r += step_r;
            t_r += dt_r;
        } else {
            c += step_c;
            t_c += dt_c;
        }
    }
    out
}

/// Hit distance for each ray, in ego-frame angle order `2π·i/rays`.
pub fn cast_rays<R: Rng>(world: &World, cfg: &SensorConfig, rng: &mut R) -> Vec<Option<f64>> {
    let obstacles = world.obstacles();
    let noise = (cfg.range_noise > 0.0).then(|| Normal::new(0.0, cfg.range_noise).expect("positive std"));
    (0..cfg.rays)
        .map(|i| {
            let angle = world.ego.theta + TAU * i as f64 / cfg.rays as f64;
            world.cast(&obstacles, angle, cfg.max_range).map(|d| match &noise {
                Some(n) => (d + n.sample(rng)).clamp(1e-6, cfg.max_range),
                None => d,
            })
        })
        .collect()
}

/// Measurement masses from one sweep: cells before a hit are free-leaning,
/// hit cells occupied-leaning, everything else vacuous. A cell that is both
/// crossed and hit within the sweep counts as hit.
pub fn inverse_sensor(spec: &GridSpec, cfg: &SensorConfig, hits: &[Option<f64>]) -> BeliefGrid {
    let mut occupied = vec![false; spec.h * spec.w];
    let mut free = vec![false; spec.h * spec.w];
    for (i, hit) in hits.iter().enumerate() {
        let angle = TAU * i as f64 / hits.len() as f64;
        let cells = match hit {
            Some(d) => traverse(spec, angle, *d, true),
            None => traverse(spec, angle, cfg.max_range, false),
        };
        for (r, c) in cells.free {
            free[r * spec.w + c] = true;
        }
        if let Some((r, c)) = cells.hit {
            occupied[r * spec.w + c] = true;
        }
    }
    let mut grid = BeliefGrid::vacuous(spec.h, spec.w, spec.resolution);
    for i in 0..spec.h * spec.w {
        if occupied[i] {
            grid.put(i, Mass { o: cfg.p_occ, f: 0.0 });
        } else if free[i] {
            grid.put(i, Mass { o: 0.0, f: cfg.p_free });
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ego_cell_is_grid_center() {
        let spec = GridSpec::new(32, 32, 1.0 / 3.0).unwrap();
        assert_eq!(spec.cell_of(0.0, 0.0), Some((16, 16)));
        assert_eq!(spec.cell_center(16, 16), (0.0, 0.0));
        assert_eq!(spec.cell_of(1.0, 0.0), Some((13, 16)));
        assert_eq!(spec.cell_of(0.0, -1.0), Some((16, 19)));
    }

    #[test]
    fn forward_ray_walks_up_the_column() {
        let spec = GridSpec::new(8, 8, 1.0).unwrap();
        let cells = traverse(&spec, 0.0, 2.7, true);
        assert_eq!(cells.free, vec![(4, 4), (3, 4), (2, 4)]);
        assert_eq!(cells.hit, Some((1, 4)));
    }

    #[test]
    fn miss_stops_at_grid_edge() {
        let spec = GridSpec::new(8, 8, 1.0).unwrap();
        let cells = traverse(&spec, 0.0, 100.0, false);
        assert_eq!(cells.free.len(), 5);
        assert_eq!(cells.hit, None);
    }
}
