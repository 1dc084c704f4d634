mod common;

use common::*;
use gridcast::attention::*;
use gridcast::params::{ConvParams, Init, ParamStore};
use gridcast::tensor::{Graph, Tensor};
use gridcast::Error;
use proptest::prelude::*;

fn dims(f_in: usize, n_heads: usize, dk: usize, dv: usize, rel: Option<(usize, usize)>) -> AttentionDims {
    AttentionDims {
        f_in,
        n_heads,
        dk_head: dk,
        dv_head: dv,
        relative: rel,
    }
}

fn build(d: AttentionDims, seed: u64) -> (ParamStore<f64>, AttentionParams) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let params = AttentionParams::new(&mut store, &mut Init::new(&mut r), "att", d);
    (store, params)
}

fn oracle_ma(store: &ParamStore<f64>, d: AttentionDims, x_q: &Tensor<f64>, x_kv: &Tensor<f64>, keep: &[bool]) -> Tensor<f64> {
    let get = |n: &str| store.get(store.id(n).unwrap_or_else(|| panic!("{n}")));
    let (h, w) = (x_q.shape()[1], x_q.shape()[2]);
    let rel = d.relative.map(|_| (get("att.rel_h"), get("att.rel_w")));
    let mut rows = vec![Vec::new(); h * w];
    for head in 0..d.n_heads {
        let out = if keep[head] {
            head_oracle(
                x_q,
                x_kv,
                get(&format!("att.{head}.wq")),
                get(&format!("att.{head}.wk")),
                get(&format!("att.{head}.wv")),
                rel,
            )
        } else {
            vec![vec![0.0; d.dv_head]; h * w]
        };
        for (row, o) in rows.iter_mut().zip(out) {
            row.extend(o);
        }
    }
    fuse_oracle(&rows, get("att.wo"), h, w)
}

fn run_ma(store: &ParamStore<f64>, params: &AttentionParams, x_q: &Tensor<f64>, x_kv: &Tensor<f64>, mask: &HeadMask) -> gridcast::Result<Tensor<f64>> {
    let g = Graph::new();
    let b = store.bind(&g, false);
    let q = g.constant(x_q.clone());
    let kv = g.constant(x_kv.clone());
    let out = multi_head_attention(&b, params, q, kv, mask)?;
    let v = g.value(out).clone();
    Ok(v)
}

#[test]
fn single_head_matches_loop_oracle() {
    let mut r = rng(1);
    let (n, dk, dv) = (7, 3, 2);
    let q = randn(&mut r, &[n, dk], 1.0);
    let k = randn(&mut r, &[n, dk], 1.0);
    let v = randn(&mut r, &[n, dv], 1.0);
    let g = Graph::new();
    let out = single_head_attention(&g, g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), None).unwrap();
    let got = g.value(out).clone();
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..dk).map(|c| q.data()[i * dk + c] * k.data()[j * dk + c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..dv {
            let want: f64 = (0..n).map(|j| logits[j].exp() / z * v.data()[j * dv + c]).sum();
            assert!((got.data()[i * dv + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_logits_average_values() {
    let mut r = rng(2);
    let (n, dv) = (5, 3);
    let q = Tensor::zeros(&[n, 2]);
    let k = randn(&mut r, &[n, 2], 1.0);
    let v = randn(&mut r, &[n, dv], 1.0);
    let g = Graph::new();
    let out = single_head_attention(&g, g.constant(q), g.constant(k), g.constant(v.clone()), None).unwrap();
    let got = g.value(out).clone();
    for c in 0..dv {
        let mean: f64 = (0..n).map(|j| v.data()[j * dv + c]).sum::<f64>() / n as f64;
        for i in 0..n {
            assert!((got.data()[i * dv + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn relative_logits_match_loop_oracle() {
    let mut r = rng(3);
    let (h, w, dk) = (3, 4, 2);
    let n = h * w;
    let q = randn(&mut r, &[n, dk], 1.0);
    let rh = randn(&mut r, &[2 * h - 1, dk], 1.0);
    let rw = randn(&mut r, &[2 * w - 1, dk], 1.0);
    let g = Graph::new();
    let s = relative_logits(&g, g.constant(q.clone()), g.constant(rh.clone()), g.constant(rw.clone()), h, w).unwrap();
    let got = g.value(s).clone();
    assert_eq!(got.shape(), [n, n]);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for i in 0..n {
        for j in 0..n {
            let (dr, dc) = ((j / w) as isize - (i / w) as isize, (j % w) as isize - (i % w) as isize);
            let a = (dr + h as isize - 1) as usize;
            let b = (dc + w as isize - 1) as usize;
            let qi = &q.data()[i * dk..(i + 1) * dk];
            let want = dot(qi, &rh.data()[a * dk..(a + 1) * dk]) + dot(qi, &rw.data()[b * dk..(b + 1) * dk]);
            assert!((got.data()[i * n + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_head_matches_oracle() {
    for (seed, rel) in [(4, None), (5, Some((3, 4)))] {
        let d = dims(5, 3, 2, 2, rel);
        let (store, params) = build(d, seed);
        let mut r = rng(seed + 100);
        let x = randn(&mut r, &[5, 3, 4], 1.0);
        let y = randn(&mut r, &[5, 3, 4], 1.0);
        let got = run_ma(&store, &params, &x, &y, &HeadMask::keep_all(3)).unwrap();
        let want = oracle_ma(&store, d, &x, &y, &[true; 3]);
        assert!(max_abs_diff(&got, &want) < 1e-10);
        let got = run_ma(&store, &params, &x, &x, &HeadMask::drop_one(3, 1)).unwrap();
        let want = oracle_ma(&store, d, &x, &x, &[true, false, true]);
        assert!(max_abs_diff(&got, &want) < 1e-10);
    }
}

#[test]
fn attention_weights_are_row_stochastic() {
    let mut r = rng(6);
    let q = randn(&mut r, &[9, 4], 3.0);
    let k = randn(&mut r, &[9, 4], 3.0);
    let s = randn(&mut r, &[9, 9], 3.0);
    let g = Graph::new();
    let a = attention_weights(&g, g.constant(q), g.constant(k), Some(g.constant(s))).unwrap();
    let a = g.value(a).clone();
    for i in 0..9 {
        let row = &a.data()[i * 9..(i + 1) * 9];
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn width_mismatch_is_an_error() {
    let g: Graph<f64> = Graph::new();
    let q = g.zeros(&[4, 3]);
    let k = g.zeros(&[4, 2]);
    assert!(matches!(attention_logits(&g, q, k, None), Err(Error::Shape(_))));
}

#[test]
fn relative_grid_mismatch_is_an_error() {
    let d = dims(2, 1, 2, 2, Some((3, 3)));
    let (store, params) = build(d, 7);
    let x = Tensor::zeros(&[2, 4, 4]);
    assert!(run_ma(&store, &params, &x, &x, &HeadMask::keep_all(1)).is_err());
}

#[test]
fn mask_length_is_checked() {
    let d = dims(2, 2, 1, 1, None);
    let (store, params) = build(d, 8);
    let x = Tensor::zeros(&[2, 2, 2]);
    let err = run_ma(&store, &params, &x, &x, &HeadMask::keep_all(3)).unwrap_err();
    assert!(matches!(err, Error::MaskLength { expected: 2, got: 3 }));
}

#[test]
fn dropping_all_heads_gives_zero() {
    let d = dims(3, 2, 2, 2, Some((2, 3)));
    let (store, params) = build(d, 9);
    let x = randn(&mut rng(10), &[3, 2, 3], 1.0);
    let out = run_ma(&store, &params, &x, &x, &HeadMask::drop_all(2)).unwrap();
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn identity_fusion_makes_drop_zero_the_head_block() {
    let d = dims(3, 3, 2, 2, None);
    let (mut store, params) = build(d, 11);
    *store.get_mut(params.wo) = Tensor::from_fn(&[6, 6], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
    let x = randn(&mut rng(12), &[3, 2, 2], 1.0);
    let full = run_ma(&store, &params, &x, &x, &HeadMask::keep_all(3)).unwrap();
    let dropped = run_ma(&store, &params, &x, &x, &HeadMask::drop_one(3, 1)).unwrap();
    for c in 0..6 {
        let a = rows(&full, c, 1);
        let b = rows(&dropped, c, 1);
        if (2..4).contains(&c) {
            assert_eq!(b.max_abs(), 0.0);
        } else {
            assert_eq!(max_abs_diff(&a, &b), 0.0);
        }
    }
}

fn temporal(d: AttentionDims, horizon: usize, seed: u64) -> (ParamStore<f64>, TemporalAttentionParams) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let params = TemporalAttentionParams::new(&mut store, &mut Init::new(&mut r), "att", d, horizon).unwrap();
    (store, params)
}

#[test]
fn temporal_with_one_frame_and_unit_weight_is_multi_head() {
    let d = dims(4, 2, 2, 3, Some((3, 3)));
    let (mut store, params) = temporal(d, 3, 13);
    *store.get_mut(params.w_tau) = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
    let mut r = rng(14);
    let x = randn(&mut r, &[4, 3, 3], 1.0);
    let h1 = randn(&mut r, &[4, 3, 3], 1.0);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let xv = g.constant(x.clone());
    let hv = g.constant(h1.clone());
    let mask = HeadMask::keep_all(2);
    let mta = multi_head_temporal_attention(&b, &params, xv, &[hv], &mask).unwrap();
    let ma = multi_head_attention(&b, &params.base, xv, hv, &mask).unwrap();
    assert!(max_abs_diff(&g.value(mta), &g.value(ma)) < 1e-12);
}

#[test]
fn temporal_matches_weighted_sum_oracle() {
    let d = dims(3, 2, 2, 2, Some((2, 3)));
    let (mut store, params) = temporal(d, 3, 15);
    let w = Tensor::from_vec(&[3], vec![0.7, -0.4, 1.3]).unwrap();
    *store.get_mut(params.w_tau) = w.clone();
    let mut r = rng(16);
    let x = randn(&mut r, &[3, 2, 3], 1.0);
    let hist: Vec<Tensor<f64>> = (0..3).map(|_| randn(&mut r, &[3, 2, 3], 1.0)).collect();
    let g = Graph::new();
    let b = store.bind(&g, false);
    let hv: Vec<_> = hist.iter().map(|t| g.constant(t.clone())).collect();
    let out = multi_head_temporal_attention(&b, &params, g.constant(x.clone()), &hv, &HeadMask::keep_all(2)).unwrap();
    // W_o is linear, so the weighted sum may be taken after fusion.
    let mut want = Tensor::zeros(&[4, 2, 3]);
    for (tau, h) in hist.iter().enumerate() {
        let term = oracle_ma(&store, d, &x, h, &[true, true]);
        want = zip(&want, &term, |a, t| a + w.data()[tau] * t);
    }
    assert!(max_abs_diff(&g.value(out), &want) < 1e-10);
}

#[test]
fn temporal_uses_only_available_history() {
    let d = dims(2, 1, 2, 2, None);
    let (store, params) = temporal(d, 4, 17);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let x = g.constant(randn(&mut rng(18), &[2, 2, 2], 1.0));
    let mask = HeadMask::keep_all(1);
    assert!(matches!(
        multi_head_temporal_attention(&b, &params, x, &[], &mask),
        Err(Error::EmptyHistory)
    ));
    let out = multi_head_temporal_attention(&b, &params, x, &[x, x], &mask).unwrap();
    assert_eq!(g.shape(out), [2, 2, 2]);
    assert!(multi_head_temporal_attention(&b, &params, x, &[x; 5], &mask).is_err());
}

#[test]
fn augmented_convs_concatenate_conv_then_attention() {
    let mut r = rng(19);
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut r);
    let cp = ConvParams::new(&mut store, &mut init, "conv", 3, 5, 3, true);
    let d = dims(3, 2, 2, 2, Some((4, 4)));
    let sa = AttentionParams::new(&mut store, &mut init, "att", d);
    let ta = TemporalAttentionParams::new(&mut store, &mut init, "tatt", d, 2).unwrap();
    let x = randn(&mut rng(20), &[3, 4, 4], 1.0);
    let h1 = randn(&mut rng(21), &[3, 4, 4], 1.0);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let xv = g.constant(x.clone());
    let hv = g.constant(h1);
    let mask = HeadMask::keep_all(2);
    let conv_ref = conv(
        &x,
        store.get(store.id("conv.w").unwrap()),
        Some(store.get(store.id("conv.b").unwrap())),
    );

    let s = saaconv(&b, &cp, &sa, xv, &mask).unwrap();
    let s = g.value(s).clone();
    assert_eq!(s.shape(), [9, 4, 4]);
    assert!(max_abs_diff(&rows(&s, 0, 5), &conv_ref) < 1e-12);
    let a = multi_head_attention(&b, &sa, xv, xv, &mask).unwrap();
    assert!(max_abs_diff(&rows(&s, 5, 4), &g.value(a)) < 1e-12);

    let t = taaconv(&b, &cp, &ta, xv, &[hv], &mask).unwrap();
    let t = g.value(t).clone();
    assert!(max_abs_diff(&rows(&t, 0, 5), &conv_ref) < 1e-12);
    let a = multi_head_temporal_attention(&b, &ta, xv, &[hv], &mask).unwrap();
    assert!(max_abs_diff(&rows(&t, 5, 4), &g.value(a)) < 1e-12);
}

#[test]
fn multi_head_gradients() {
    let d = dims(3, 2, 2, 2, Some((2, 3)));
    let (store, params) = build(d, 22);
    let mut r = rng(23);
    let inputs = [randn(&mut r, &[3, 2, 3], 1.0), randn(&mut r, &[3, 2, 3], 1.0)];
    let report = module_gradcheck(&store, &inputs, 24, |b, x| {
        multi_head_attention(b, &params, x[0], x[1], &HeadMask::keep_all(2))
    });
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn temporal_gradients() {
    let d = dims(2, 2, 1, 2, Some((2, 2)));
    let (store, params) = temporal(d, 2, 25);
    let mut r = rng(26);
    let inputs: Vec<_> = (0..3).map(|_| randn(&mut r, &[2, 2, 2], 1.0)).collect();
    let report = module_gradcheck(&store, &inputs, 27, |b, x| {
        multi_head_temporal_attention(b, &params, x[0], &x[1..], &HeadMask::drop_one(2, 0))
    });
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_accounts_for_every_channel(channels in 2usize..300, heads in 1usize..9, frac in 0.05f64..0.5) {
        match attention_split(channels, frac, heads) {
            Ok((conv, per_head)) => {
                prop_assert!(conv >= 1);
                prop_assert!(per_head >= 1);
                prop_assert_eq!(conv + per_head * heads, channels);
            }
            Err(_) => {
                let per_head = ((frac * channels as f64 / heads as f64).round() as usize).max(1);
                prop_assert!(per_head * heads >= channels);
            }
        }
    }

    #[test]
    fn weights_stay_stochastic_for_any_logit_scale(scale in 0.01f64..50.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let q = randn(&mut r, &[6, 3], scale);
        let k = randn(&mut r, &[6, 3], scale);
        let g = Graph::new();
        let a = attention_weights(&g, g.constant(q), g.constant(k), None).unwrap();
        let a = g.value(a).clone();
        prop_assert!(a.all_finite());
        for i in 0..6 {
            let s: f64 = a.data()[i * 6..(i + 1) * 6].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
