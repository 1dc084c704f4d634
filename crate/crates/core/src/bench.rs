//! Wall-time measurement of temporal attention against its horizon.

use std::time::Instant;

use gridcast_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_temporal_attention, AttentionDims, HeadMask, TemporalAttentionParams};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub grid: usize,
    pub channels: usize,
    pub n_heads: usize,
    pub horizons: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grid: 16,
            channels: 32,
            n_heads: 4,
            horizons: vec![1, 2, 4, 6],
            runs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub horizon: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

struct Setup {
    horizon: usize,
    store: ParamStore<f32>,
    params: TemporalAttentionParams,
    x: Tensor<f32>,
    history: Vec<Tensor<f32>>,
}

impl Setup {
    fn run(&self, mask: &HeadMask) -> Result<f64> {
        let start = Instant::now();
        let g = Graph::new();
        let b = self.store.bind(&g, false);
        let xv = g.constant(self.x.clone());
        let hv: Vec<_> = self.history.iter().map(|t| g.constant(t.clone())).collect();
        let out = multi_head_temporal_attention(&b, &self.params, xv, &hv, mask)?;
        std::hint::black_box(g.value(out).data()[0]);
        Ok(start.elapsed().as_secs_f64())
    }
}

fn median(sorted: &[f64]) -> f64 {
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    }
}

/// Times one forward pass of temporal attention with a full history for
/// every horizon in `cfg`. Horizons are timed round-robin, `cfg.runs`
/// rounds after one warm-up round, so load changes hit all of them alike.
pub fn bench_temporal_attention(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.runs == 0 || cfg.grid == 0 || cfg.n_heads == 0 || cfg.horizons.is_empty() || cfg.horizons.contains(&0) {
        return Err(Error::config("benchmark sizes must be positive"));
    }
    if cfg.channels % cfg.n_heads != 0 {
        return Err(Error::config(format!(
            "{} channels do not divide over {} heads",
            cfg.channels, cfg.n_heads
        )));
    }
    let per_head = cfg.channels / cfg.n_heads;
    let dims = AttentionDims {
        f_in: cfg.channels,
        n_heads: cfg.n_heads,
        dk_head: per_head,
        dv_head: per_head,
        relative: Some((cfg.grid, cfg.grid)),
    };
    let shape = [cfg.channels, cfg.grid, cfg.grid];
    let mask = HeadMask::keep_all(cfg.n_heads);
    let setups = cfg
        .horizons
        .iter()
        .map(|&horizon| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(&mut rng);
            let params = TemporalAttentionParams::new(&mut store, &mut init, "att", dims, horizon)?;
            let x = init.normal(&shape, 1.0);
            let history = (0..horizon).map(|_| init.normal(&shape, 1.0)).collect();
            Ok(Setup {
                horizon,
                store,
                params,
                x,
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(cfg.runs); setups.len()];
    for round in 0..=cfg.runs {
        for (setup, t) in setups.iter().zip(&mut times) {
            let secs = setup.run(&mask)?;
            if round > 0 {
                t.push(secs);
            }
        }
    }
    Ok(setups
        .iter()
        .zip(times)
        .map(|(setup, mut t)| {
            t.sort_by(f64::total_cmp);
            BenchRow {
                horizon: setup.horizon,
                median_s: median(&t),
                min_s: t[0],
                max_s: t[t.len() - 1],
            }
        })
        .collect())
}
