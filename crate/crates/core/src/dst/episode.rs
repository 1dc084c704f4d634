//! Episode generation and the `GCEP` episode file.
//!
//! Layout (little-endian): magic `GCEP`, `u32` version, `u32` H, `u32` W,
//! `u32` T, `f64` resolution; T frames, each the occupied plane then the
//! free plane as `f32`; T ego poses `(x, y, θ)` as `f64`; `u32` box count
//! followed by `(u32 step, u32 id, f64 cx, cy, length, width, heading)`
//! records in world coordinates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use gridcast_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masses::{check_alpha, BeliefGrid, CellClass, ClassGrid, Mass};
use super::sensor::{cast_rays, inverse_sensor, GridSpec, SensorConfig};
use super::world::{BoxShape, Pose, Scenario};
use crate::error::{Error, Result};

pub const EPISODE_MAGIC: &[u8; 4] = b"GCEP";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub scenario: Scenario,
    pub steps: usize,
    pub grid: GridSpec,
    /// Aging factor applied before each measurement.
    pub alpha: f64,
    pub sensor: SensorConfig,
    /// Seconds per step.
    pub dt: f64,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn desk(scenario: Scenario, steps: usize, seed: u64) -> Self {
        EpisodeConfig {
            scenario,
            steps,
            grid: GridSpec {
                h: 32,
                w: 32,
                resolution: 1.0 / 3.0,
            },
            alpha: 0.98,
            sensor: SensorConfig::default(),
            dt: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("episodes need at least one step"));
        }
        GridSpec::new(self.grid.h, self.grid.w, self.grid.resolution)?;
        check_alpha(self.alpha)?;
        self.sensor.validate()?;
        if !(self.dt > 0.0) {
            return Err(Error::config("time step must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth box of one object at one step, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub step: u32,
    pub id: u32,
    pub shape: BoxShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub grid: GridSpec,
    /// `[2, H, W]` mass frames, occupied plane first.
    pub frames: Vec<Tensor<f32>>,
    pub poses: Vec<Pose>,
    pub boxes: Vec<BoxRecord>,
}

/// Moves `prior` from the ego frame at `from` into the frame at `to`.
/// Cells with no source on the old grid become vacuous.
pub fn reproject(prior: &BeliefGrid, spec: &GridSpec, from: &Pose, to: &Pose) -> BeliefGrid {
    let mut out = BeliefGrid::vacuous(spec.h, spec.w, spec.resolution);
    for r in 0..spec.h {
        for c in 0..spec.w {
            let (f, l) = spec.cell_center(r, c);
            let (x, y) = to.to_world(f, l);
            let (f0, l0) = from.to_local(x, y);
            if let Some((r0, c0)) = spec.cell_of(f0, l0) {
                out.set(r, c, prior.get(r0, c0));
            }
        }
    }
    out
}

/// Simulates one episode. If an object leaves the world the episode ends
/// early with a warning.
pub fn generate_episode(cfg: &EpisodeConfig) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut world = cfg.scenario.build(&mut rng);
    let spec = cfg.grid;
    let mut belief = BeliefGrid::vacuous(spec.h, spec.w, spec.resolution);
    let mut frames = Vec::with_capacity(cfg.steps);
    let mut poses = Vec::with_capacity(cfg.steps);
    let mut boxes = Vec::new();
    for step in 0..cfg.steps {
        if step > 0 {
            let before = world.ego;
            if let Err(e) = world.advance(cfg.dt) {
                log::warn!("episode truncated at step {step}/{}: {e}", cfg.steps);
                break;
            }
            belief = reproject(&belief, &spec, &before, &world.ego);
            belief.age(cfg.alpha)?;
        }
        let hits = cast_rays(&world, &cfg.sensor, &mut rng);
        let meas = inverse_sensor(&spec, &cfg.sensor, &hits);
        belief.combine(&meas)?;
        frames.push(belief.to_tensor());
        poses.push(world.ego);
        boxes.extend(world.movers.iter().map(|m| BoxRecord {
            step: step as u32,
            id: m.id,
            shape: m.shape,
        }));
    }
    Ok(Episode {
        grid: spec,
        frames,
        poses,
        boxes,
    })
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn classes(&self, step: usize) -> ClassGrid {
        ClassGrid::from_tensor(&self.frames[step]).expect("frames are [2, H, W]")
    }

    pub fn boxes_at(&self, step: usize) -> impl Iterator<Item = &BoxRecord> {
        self.boxes.iter().filter(move |b| b.step as usize == step)
    }

    /// Cells whose square overlaps any ground-truth box at `step`, in the
    /// ego frame of `step`. Overlap rather than center containment keeps the
    /// cells of LiDAR returns on the box outline.
    pub fn box_mask(&self, step: usize) -> Vec<bool> {
        let spec = &self.grid;
        let pose = self.poses[step];
        let shapes: Vec<BoxShape> = self.boxes_at(step).map(|b| b.shape).collect();
        let mut mask = vec![false; spec.h * spec.w];
        if shapes.is_empty() {
            return mask;
        }
        let half = spec.resolution / 2.0;
        for r in 0..spec.h {
            for c in 0..spec.w {
                let (f, l) = spec.cell_center(r, c);
                let cell = [(half, half), (-half, half), (-half, -half), (half, -half)]
                    .map(|(df, dl)| pose.to_world(f + df, l + dl));
                mask[r * spec.w + c] = shapes.iter().any(|s| s.overlaps(&cell));
            }
        }
        mask
    }

    /// Checks closure on every stored cell.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.h * self.grid.w;
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.shape() != [2, self.grid.h, self.grid.w] {
                return Err(Error::Format(format!("frame {t} has shape {:?}", frame.shape())));
            }
            let (o, f) = frame.data().split_at(n);
            if o.iter().zip(f).any(|(&o, &f)| !Mass { o: o as f64, f: f as f64 }.is_valid(1e-6)) {
                return Err(Error::Format(format!("frame {t} violates mass closure")));
            }
        }
        if self.poses.len() != self.frames.len() {
            return Err(Error::Format("pose count differs from frame count".into()));
        }
        Ok(())
    }

    /// Occupied-class count inside the box mask of `step`.
    pub fn occupied_in_boxes(&self, classes: &ClassGrid, step: usize) -> usize {
        self.box_mask(step)
            .iter()
            .zip(&classes.cells)
            .filter(|(&m, &c)| m && c == CellClass::Occupied)
            .count()
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let spec = &self.grid;
        out.write_all(EPISODE_MAGIC)?;
        for v in [EPISODE_VERSION, spec.h as u32, spec.w as u32, self.frames.len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&spec.resolution.to_le_bytes())?;
        for frame in &self.frames {
            for v in frame.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for p in &self.poses {
            for v in [p.x, p.y, p.theta] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.write_all(&(self.boxes.len() as u32).to_le_bytes())?;
        for b in &self.boxes {
            out.write_all(&b.step.to_le_bytes())?;
            out.write_all(&b.id.to_le_bytes())?;
            let s = &b.shape;
            for v in [s.cx, s.cy, s.length, s.width, s.heading] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != EPISODE_MAGIC {
            return Err(Error::Format("not an episode file (bad magic)".into()));
        }
        let version = read_u32(input)?;
        if version != EPISODE_VERSION {
            return Err(Error::Format(format!("unsupported episode version {version}")));
        }
        let h = read_u32(input)? as usize;
        let w = read_u32(input)? as usize;
        let t = read_u32(input)? as usize;
        let resolution = read_f64(input)?;
        let grid = GridSpec::new(h, w, resolution).map_err(|e| Error::Format(e.to_string()))?;
        let n = 2 * h * w;
        let mut frames = Vec::with_capacity(t);
        let mut buf = vec![0u8; n * 4];
        for _ in 0..t {
            input.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            frames.push(Tensor::from_vec(&[2, h, w], data)?);
        }
        let poses = (0..t)
            .map(|_| {
                Ok(Pose {
                    x: read_f64(input)?,
                    y: read_f64(input)?,
                    theta: read_f64(input)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let count = read_u32(input)? as usize;
        let boxes = (0..count)
            .map(|_| {
                Ok(BoxRecord {
                    step: read_u32(input)?,
                    id: read_u32(input)?,
                    shape: BoxShape {
                        cx: read_f64(input)?,
                        cy: read_f64(input)?,
                        length: read_f64(input)?,
                        width: read_f64(input)?,
                        heading: read_f64(input)?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if boxes.iter().any(|b| b.step as usize >= t) {
            return Err(Error::Format("box record refers to a missing step".into()));
        }
        Ok(Episode {
            grid,
            frames,
            poses,
            boxes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
