//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops over `Vec<f64>` and never
//! calls the graph ops it is used to check.

#![allow(dead_code)]

use gridcast::dst::{CellClass, ClassGrid, Mass};
use gridcast::params::{Bound, ParamStore};
use gridcast::tensor::{check_projected_gradients, GradCheckReport, Graph, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn randn(rng: &mut Rng64, shape: &[usize], std: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| d.sample(rng))
}

pub fn uniform(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Overwrites every parameter with fresh N(0, std) values so zero-initialised
/// biases and peepholes take part in the checks.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng64, std: f64) {
    for v in store.values_mut() {
        *v = randn(rng, v.shape(), std);
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `[c_out, H, W]` same-padded cross-correlation by direct summation.
pub fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    assert_eq!(w.shape()[1], ci);
    let pad = (k / 2) as isize;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for r in 0..h {
            for c in 0..wd {
                let mut s = b.map_or(0.0, |b| b.data()[o]);
                for i in 0..ci {
                    for dy in 0..k {
                        for dx in 0..k {
                            let rr = r as isize + dy as isize - pad;
                            let cc = c as isize + dx as isize - pad;
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                continue;
                            }
                            s += xd[(i * h + rr as usize) * wd + cc as usize] * wdat[((o * ci + i) * k + dy) * k + dx];
                        }
                    }
                }
                out[(o * h + r) * wd + c] = s;
            }
        }
    }
    Tensor::from_vec(&[co, h, wd], out).unwrap()
}

pub fn concat0(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let rest = parts[0].shape()[1..].to_vec();
    let c: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let mut shape = vec![c];
    shape.extend(rest);
    Tensor::from_vec(&shape, data).unwrap()
}

pub fn rows(t: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let inner: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::from_vec(&shape, t.data()[start * inner..(start + len) * inner].to_vec()).unwrap()
}

pub fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

pub fn map(a: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::from_vec(a.shape(), a.data().iter().map(|&x| f(x)).collect()).unwrap()
}

/// Broadcasts a per-channel vector over `[c, H, W]`.
pub fn per_channel(v: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let c = v.shape()[0];
    Tensor::from_fn(&[c, h, w], |i| v.data()[i / (h * w)])
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One attention head by explicit loops. `x_q`, `x_kv` are `[F, H, W]`;
/// projections `[F, d]`; relative tables `[2H−1, d]`, `[2W−1, d]`.
/// Returns `[HW, dv]` row-major.
pub fn head_oracle(
    x_q: &Tensor<f64>,
    x_kv: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    rel: Option<(&Tensor<f64>, &Tensor<f64>)>,
) -> Vec<Vec<f64>> {
    let (f, h, w) = (x_q.shape()[0], x_q.shape()[1], x_q.shape()[2]);
    let n = h * w;
    let dk = wq.shape()[1];
    let dv = wv.shape()[1];
    let proj = |x: &Tensor<f64>, m: &Tensor<f64>, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|p| {
                (0..d)
                    .map(|j| (0..f).map(|c| x.data()[c * n + p] * m.data()[c * d + j]).sum())
                    .collect()
            })
            .collect()
    };
    let q = proj(x_q, wq, dk);
    let k = proj(x_kv, wk, dk);
    let v = proj(x_kv, wv, dv);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..n)
        .map(|i| {
            let (ri, ci) = (i / w, i % w);
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let (rj, cj) = (j / w, j % w);
                    let mut l = dot(&q[i], &k[j]);
                    if let Some((rh, rw)) = rel {
                        let a = rj + h - 1 - ri;
                        let b = cj + w - 1 - ci;
                        l += dot(&q[i], &rh.data()[a * dk..(a + 1) * dk]);
                        l += dot(&q[i], &rw.data()[b * dk..(b + 1) * dk]);
                    }
                    l / (dk as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..dv).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect()
        })
        .collect()
}

/// Applies `W_o` to concatenated head rows and returns `[dv, H, W]`.
pub fn fuse_oracle(heads: &[Vec<f64>], wo: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let dv = wo.shape()[0];
    let n = h * w;
    let mut out = vec![0.0; dv * n];
    for p in 0..n {
        for o in 0..dv {
            out[o * n + p] = (0..dv).map(|c| heads[p][c] * wo.data()[c * dv + o]).sum();
        }
    }
    Tensor::from_vec(&[dv, h, w], out).unwrap()
}

/// Gradient check over every parameter of `store` plus `inputs`. `f` gets
/// the bound parameters and one var per input and returns any tensor; the
/// checked scalar is `Σ out ∘ R` for a fixed random `R`.
pub fn module_gradcheck(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&Bound<'_, f64>, &[Var]) -> gridcast::Result<Var>,
) -> GradCheckReport {
    module_gradcheck_floor(store, inputs, seed, 1e-8, f)
}

/// As [`module_gradcheck`] with an explicit magnitude floor for the
/// relative error.
pub fn module_gradcheck_floor(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    seed: u64,
    floor: f64,
    f: impl Fn(&Bound<'_, f64>, &[Var]) -> gridcast::Result<Var>,
) -> GradCheckReport {
    let np = store.len();
    let mut all: Vec<Tensor<f64>> = store.values().to_vec();
    all.extend(inputs.iter().cloned());
    // Probe the output shape once to draw the projection.
    let shape = {
        let g = Graph::new();
        let vars: Vec<Var> = all.iter().map(|t| g.constant(t.clone())).collect();
        let b = Bound::from_vars(&g, vars[..np].to_vec());
        let out = f(&b, &vars[np..]).expect("forward");
        g.shape(out)
    };
    let r = randn(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    check_projected_gradients(
        |g, vars| {
            let b = Bound::from_vars(g, vars[..np].to_vec());
            f(&b, &vars[np..]).map_err(|e| TensorError::Format(e.to_string()))
        },
        &all,
        &r,
        1e-5,
        floor,
    )
    .expect("gradient check runs")
}

/// Dempster's rule over explicit focal sets, as bitmasks of {O, F}.
pub fn combine_oracle(a: Mass, b: Mass) -> Option<Mass> {
    const O: u8 = 1;
    const F: u8 = 2;
    const THETA: u8 = 3;
    let focal = |m: Mass| [(O, m.o), (F, m.f), (THETA, 1.0 - m.o - m.f)];
    let mut acc = [0.0; 4];
    for (sa, ma) in focal(a) {
        for (sb, mb) in focal(b) {
            acc[(sa & sb) as usize] += ma * mb;
        }
    }
    let k = acc[0];
    (1.0 - k > 1e-12).then(|| Mass {
        o: acc[O as usize] / (1.0 - k),
        f: acc[F as usize] / (1.0 - k),
    })
}

/// Brute-force directed distance: every pair of cells is compared.
pub fn directed_oracle(m1: &ClassGrid, m2: &ClassGrid, class: CellClass) -> f64 {
    let w = m1.w;
    let src: Vec<usize> = (0..m1.cells.len()).filter(|&i| m1.cells[i] == class).collect();
    let dst: Vec<usize> = (0..m2.cells.len()).filter(|&i| m2.cells[i] == class).collect();
    if src.is_empty() {
        return 0.0;
    }
    let total: usize = src
        .iter()
        .map(|&i| {
            dst.iter()
                .map(|&j| (i / w).abs_diff(j / w) + (i % w).abs_diff(j % w))
                .min()
                .unwrap_or(m1.h + m1.w)
        })
        .sum();
    total as f64 / src.len() as f64
}

pub fn is_oracle(a: &ClassGrid, b: &ClassGrid) -> f64 {
    CellClass::ALL
        .iter()
        .map(|&c| directed_oracle(a, b, c) + directed_oracle(b, a, c))
        .sum()
}

