//! L1 sequence training with Adam.

use std::path::PathBuf;

use gridcast_tensor::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dst::Episode;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prednet::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Observed frames per sample.
    pub n: usize,
    /// Predicted frames per sample.
    pub p: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    /// Cut gradients through the recurrent state every this many steps.
    pub truncation: Option<usize>,
    /// Where to write `best.ckpt`, `final.ckpt` and diagnostics.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 5,
            p: 15,
            epochs: 200,
            samples_per_epoch: 32,
            batch: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip: Some(1.0),
            truncation: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::config("training needs N ≥ 1 and P ≥ 1"));
        }
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch == 0 {
            return Err(Error::config("epochs, samples per epoch and batch must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("Adam hyperparameters out of range"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Mean absolute error over every predicted frame, channel and cell.
pub fn l1_sequence_loss<T: Scalar>(g: &Graph<T>, preds: &[Var], targets: &[Var]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions against {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    let mut count = 0;
    for (&p, &t) in preds.iter().zip(targets) {
        if g.shape(p) != g.shape(t) {
            return Err(Error::shape(format!(
                "prediction {:?} against target {:?}",
                g.shape(p),
                g.shape(t)
            )));
        }
        count += g.shape(p).iter().product::<usize>();
        terms.push(g.sum(g.abs(g.sub(p, t)?)?)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, T::from_f64_lossy(1.0 / count as f64))?)
}

/// Plain-tensor version of [`l1_sequence_loss`].
pub fn l1_loss<T: Scalar>(preds: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<f64> {
    let g = Graph::new();
    let p: Vec<Var> = preds.iter().map(|t| g.constant(t.clone())).collect();
    let t: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
    let loss = l1_sequence_loss(&g, &p, &t)?;
    let v = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    Ok(v)
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer state, parameters and gradients differ in count"));
        }
        self.t += 1;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = c(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (c(self.lr), c(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} with gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// A training window: `n + p` consecutive frames of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
}

/// Every window of `len` frames across `episodes`.
pub fn windows(episodes: &[Episode], len: usize) -> Vec<Window> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..=ep.len().saturating_sub(len)).filter(move |_| ep.len() >= len).map(move |s| Window { episode: e, start: s }))
        .collect()
}

/// Loss and gradients of one window.
pub fn sample_gradients<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    frames: &[Tensor<T>],
    n: usize,
    truncation: Option<usize>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let p = frames.len() - n;
    let g = Graph::new();
    let b = params.bind(&g, true);
    let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
    let preds = model.rollout_truncated(&b, &vars[..n], p, None, truncation)?;
    let loss = l1_sequence_loss(&g, &preds, &vars[n..])?;
    let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, b.grads()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    /// Mean sample loss per epoch.
    pub curve: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub best: ParamStore<T>,
    pub last: ParamStore<T>,
}

/// Trains `params` in place on windows of `episodes`.
pub fn train<T: Scalar>(
    model: &Model,
    params: ParamStore<T>,
    episodes: &[Episode],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, params, episodes, cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, loss)` after each epoch.
pub fn train_with<T: Scalar>(
    model: &Model,
    mut params: ParamStore<T>,
    episodes: &[Episode],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let len = cfg.n + cfg.p;
    let pool = windows(episodes, len);
    if pool.is_empty() {
        return Err(Error::config(format!("no episode has the {len} frames a training window needs")));
    }
    let tensors: Vec<Vec<Tensor<T>>> = episodes
        .iter()
        .map(|e| e.frames.iter().map(|f| f.cast()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params.values(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::INFINITY, params.clone());
    let mut order: Vec<Window> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut draws = Vec::with_capacity(cfg.samples_per_epoch);
        while draws.len() < cfg.samples_per_epoch {
            if order.is_empty() {
                order = pool.clone();
                order.shuffle(&mut rng);
            }
            draws.push(order.pop().expect("refilled"));
        }
        let mut total = 0.0;
        for batch in draws.chunks(cfg.batch) {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for w in batch {
                let frames = &tensors[w.episode][w.start..w.start + len];
                let (loss, grads) = sample_gradients(model, &params, frames, cfg.n, cfg.truncation)?;
                // Non-finite gradients count as divergence too.
                if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                    if let Some(dir) = &cfg.checkpoint_dir {
                        std::fs::create_dir_all(dir)?;
                        let path = dir.join("diverged.ckpt");
                        let meta = serde_json::json!({ "epoch": epoch, "loss": loss.to_string() });
                        Checkpoint::new(model.config(), params.clone(), meta).save(&path)?;
                        log::error!("training diverged at epoch {epoch} (loss {loss}); parameters saved to {}", path.display());
                    }
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (a, g) in a.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a = *a + g);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * scale));
            if let Some(c) = cfg.clip {
                clip_global_norm(&mut grads, c);
            }
            adam.step(params.values_mut(), &grads)?;
        }
        let loss = total / draws.len() as f64;
        curve.push(loss);
        log::info!("epoch {epoch}: loss {loss:.6}");
        on_epoch(epoch, loss);
        if loss < best.1 {
            best = (epoch, loss, params.clone());
        }
    }
    let outcome = TrainOutcome {
        curve,
        best_epoch: best.0,
        best_loss: best.1,
        best: best.2,
        last: params,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let meta = |epoch: usize, loss: f64| serde_json::json!({ "epoch": epoch, "loss": loss, "seed": cfg.seed });
        Checkpoint::new(model.config(), outcome.best.clone(), meta(outcome.best_epoch, outcome.best_loss))
            .save(&dir.join("best.ckpt"))?;
        let last_loss = *outcome.curve.last().expect("at least one epoch");
        Checkpoint::new(model.config(), outcome.last.clone(), meta(cfg.epochs, last_loss)).save(&dir.join("final.ckpt"))?;
    }
    Ok(outcome)
}
