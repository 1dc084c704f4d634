//! Prediction metrics: MSE, image similarity, and the occupied-in-box ratio
//! (MOBBM), plus per-horizon evaluation over episodes.

use std::collections::VecDeque;
use std::io::Write;

use gridcast_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::HeadMask;
use crate::dst::{CellClass, ClassGrid, Episode};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prednet::Model;

/// Mean squared difference over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(sum / pred.numel().max(1) as f64)
}

/// Manhattan distance from every cell to the nearest cell of `class`, or
/// `None` if the class does not occur.
pub fn distance_field(grid: &ClassGrid, class: CellClass) -> Option<Vec<usize>> {
    let (h, w) = (grid.h, grid.w);
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for (i, &c) in grid.cells.iter().enumerate() {
        if c == class {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        return None;
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let next = dist[i] + 1;
        let mut visit = |j: usize| {
            if dist[j] == usize::MAX {
                dist[j] = next;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
    }
    Some(dist)
}

/// Mean distance from the `class` cells of `m1` to the nearest `class` cell
/// of `m2`. Zero if `m1` has no such cells; distances count as `h + w` when
/// `m2` has none.
pub fn directed_distance(m1: &ClassGrid, m2: &ClassGrid, class: CellClass) -> f64 {
    let count = m1.count(class);
    if count == 0 {
        return 0.0;
    }
    let total: usize = match distance_field(m2, class) {
        Some(field) => m1
            .cells
            .iter()
            .zip(&field)
            .filter(|(&c, _)| c == class)
            .map(|(_, &d)| d)
            .sum(),
        None => count * (m1.h + m1.w),
    };
    total as f64 / count as f64
}

/// Symmetrised picture distance summed over the three cell classes.
pub fn image_similarity(m1: &ClassGrid, m2: &ClassGrid) -> Result<f64> {
    if (m1.h, m1.w) != (m2.h, m2.w) {
        return Err(Error::shape(format!(
            "image similarity of {}×{} against {}×{}",
            m1.h, m1.w, m2.h, m2.w
        )));
    }
    Ok(CellClass::ALL
        .iter()
        .map(|&c| directed_distance(m1, m2, c) + directed_distance(m2, m1, c))
        .sum())
}

/// Occupied cells inside `mask` in `pred` over those in `target`; `None`
/// when the target has none.
pub fn mobbm(pred: &ClassGrid, target: &ClassGrid, mask: &[bool]) -> Result<Option<f64>> {
    if pred.cells.len() != target.cells.len() || mask.len() != pred.cells.len() {
        return Err(Error::shape("mobbm grids and box mask differ in size"));
    }
    let count = |g: &ClassGrid| {
        g.cells
            .iter()
            .zip(mask)
            .filter(|(&c, &m)| m && c == CellClass::Occupied)
            .count()
    };
    let denom = count(target);
    Ok((denom > 0).then(|| count(pred) as f64 / denom as f64))
}

/// Anything producing `p` future frames from observed frames.
pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&self, inputs: &[Tensor<f32>], p: usize) -> Result<Vec<Tensor<f32>>>;
}

/// Repeats the last observed frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn predict(&self, inputs: &[Tensor<f32>], p: usize) -> Result<Vec<Tensor<f32>>> {
        let last = inputs
            .last()
            .ok_or_else(|| Error::config("persistence needs at least one input frame"))?;
        Ok(vec![last.clone(); p])
    }
}

/// A trained network with optional head mask.
pub struct ModelPredictor<'a> {
    pub name: String,
    pub model: &'a Model,
    pub params: &'a ParamStore<f32>,
    pub mask: Option<HeadMask>,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, inputs: &[Tensor<f32>], p: usize) -> Result<Vec<Tensor<f32>>> {
        self.model.predict(self.params, inputs, p, self.mask.as_ref())
    }
}

/// Per-horizon metrics of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub mse: Vec<f64>,
    pub is: Vec<f64>,
    pub mobbm: Vec<Option<f64>>,
}

/// Runs `predictor` on the first `n + p` frames of `episode`.
pub fn evaluate_episode(predictor: &dyn Predictor, episode: &Episode, n: usize, p: usize) -> Result<EpisodeMetrics> {
    if n == 0 || p == 0 {
        return Err(Error::config("evaluation needs N ≥ 1 and P ≥ 1"));
    }
    if episode.len() < n + p {
        return Err(Error::config(format!(
            "episode has {} frames, N + P = {} needed",
            episode.len(),
            n + p
        )));
    }
    let preds = predictor.predict(&episode.frames[..n], p)?;
    let mut out = EpisodeMetrics {
        mse: Vec::with_capacity(p),
        is: Vec::with_capacity(p),
        mobbm: Vec::with_capacity(p),
    };
    for (tau, pred) in preds.iter().enumerate() {
        let step = n + tau;
        let target = &episode.frames[step];
        out.mse.push(mse(pred, target)?);
        let pc = ClassGrid::from_tensor(pred)?;
        let tc = episode.classes(step);
        out.is.push(image_similarity(&pc, &tc)?);
        out.mobbm.push(mobbm(&pc, &tc, &episode.box_mask(step))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error of the mean.
    pub stderr: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat {
            mean,
            stderr,
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Prediction horizon, 1-based.
    pub horizon: usize,
    pub mse: Stat,
    pub is: Stat,
    /// `None` when no episode had occupied target cells inside boxes.
    pub mobbm: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub dataset: String,
    pub n: usize,
    pub p: usize,
    pub episodes: usize,
    pub mse: Stat,
    pub is: Stat,
    pub mobbm: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub steps: Vec<StepRecord>,
    pub summary: Summary,
    pub episodes: Vec<EpisodeMetrics>,
}

impl EvalReport {
    pub fn mse(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mse.mean).collect()
    }

    pub fn is(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.is.mean).collect()
    }

    /// Mean MOBBM per horizon, NaN where undefined.
    pub fn mobbm(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.mobbm.map_or(f64::NAN, |m| m.mean))
            .collect()
    }

    /// One JSON record per horizon followed by a summary record.
    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut *out, &serde_json::json!({ "record": "step", "step": s }))?;
            writeln!(out)?;
        }
        serde_json::to_writer(&mut *out, &serde_json::json!({ "record": "summary", "summary": self.summary }))?;
        writeln!(out)?;
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        let mut summary = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            match v.get("record").and_then(|r| r.as_str()) {
                Some("step") => steps.push(serde_json::from_value(v["step"].clone())?),
                Some("summary") => summary = Some(serde_json::from_value(v["summary"].clone())?),
                _ => return Err(Error::Format(format!("unrecognised report line: {line}"))),
            }
        }
        let summary = summary.ok_or_else(|| Error::Format("report has no summary record".into()))?;
        Ok(EvalReport {
            steps,
            summary,
            episodes: Vec::new(),
        })
    }
}

/// Evaluates `predictor` on every episode long enough for `n + p` frames.
pub fn evaluate(
    predictor: &dyn Predictor,
    episodes: &[Episode],
    n: usize,
    p: usize,
    dataset: &str,
) -> Result<EvalReport> {
    let usable: Vec<&Episode> = episodes.iter().filter(|e| e.len() >= n + p).collect();
    if usable.len() < episodes.len() {
        log::warn!(
            "skipping {} episodes shorter than {} frames",
            episodes.len() - usable.len(),
            n + p
        );
    }
    if usable.is_empty() {
        return Err(Error::config(format!("no episode has the {} frames evaluation needs", n + p)));
    }
    let per_episode = usable
        .iter()
        .map(|e| evaluate_episode(predictor, e, n, p))
        .collect::<Result<Vec<_>>>()?;
    let column = |f: &dyn Fn(&EpisodeMetrics) -> Option<f64>| -> Vec<f64> { per_episode.iter().filter_map(f).collect() };
    let steps = (0..p)
        .map(|t| StepRecord {
            horizon: t + 1,
            mse: Stat::of(&column(&|m| Some(m.mse[t]))).expect("non-empty"),
            is: Stat::of(&column(&|m| Some(m.is[t]))).expect("non-empty"),
            mobbm: Stat::of(&column(&|m| m.mobbm[t])),
        })
        .collect();
    let flat = |f: &dyn Fn(&EpisodeMetrics) -> Vec<f64>| -> Vec<f64> {
        // Average over horizons first, so episodes weigh equally.
        per_episode
            .iter()
            .map(f)
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect()
    };
    let summary = Summary {
        model: predictor.name(),
        dataset: dataset.to_string(),
        n,
        p,
        episodes: per_episode.len(),
        mse: Stat::of(&flat(&|m| m.mse.clone())).expect("non-empty"),
        is: Stat::of(&flat(&|m| m.is.clone())).expect("non-empty"),
        mobbm: Stat::of(&flat(&|m| m.mobbm.iter().flatten().copied().collect())),
    };
    Ok(EvalReport {
        steps,
        summary,
        episodes: per_episode,
    })
}
