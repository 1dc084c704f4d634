mod common;

use common::*;
use gridcast::attention::HeadMask;
use gridcast::cells::CellKind;
use gridcast::params::ParamStore;
use gridcast::prednet::*;
use gridcast::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    store.get(store.id(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn tiny(kind: fn(&[usize], (usize, usize)) -> StackConfig) -> StackConfig {
    let mut cfg = kind(&[2, 4, 8], (8, 8));
    cfg.attention.n_heads = 2;
    cfg.attention.horizon = 2;
    cfg
}

fn build(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore<f64>) {
    Model::build::<f64>(cfg, seed).unwrap()
}

fn frames(seed: u64, n: usize, grid: (usize, usize)) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let o = uniform(&mut r, &[1, grid.0, grid.1], 0.0, 0.5);
            let f = uniform(&mut r, &[1, grid.0, grid.1], 0.0, 0.5);
            concat0(&[&o, &f])
        })
        .collect()
}

fn assert_valid_mass(t: &Tensor<f64>) {
    let plane = t.numel() / 2;
    let d = t.data();
    for i in 0..plane {
        let (o, f) = (d[i], d[plane + i]);
        assert!((0.0..=1.0).contains(&o) && (0.0..=1.0).contains(&f), "{o} {f}");
        assert!(o + f <= 1.0 + 1e-12);
    }
}

/// Parameter count by formula for a PredNet stack of ConvLSTM layers.
fn vanilla_count(channels: &[usize], k: usize) -> usize {
    let n = channels.len();
    let mut total = 0;
    for l in 0..n {
        let c = channels[l];
        let above = if l + 1 < n { channels[l + 1] } else { 0 };
        let c_in = 2 * c + above;
        total += 4 * (c * c_in * k * k + c * c * k * k) + 4 * c + 3 * c;
        total += c * c * k * k + c;
        if l > 0 {
            total += c * 2 * channels[l - 1] * k * k + c;
        }
    }
    total
}

#[test]
fn parameter_count_matches_formula() {
    for ch in [vec![2, 4, 8], vec![2, 48, 96, 192]] {
        let cfg = ModelConfig::Prednet(StackConfig::vanilla(&ch, (32, 32)));
        let (_, store) = Model::build::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.num_scalars(), vanilla_count(&ch, 3));
    }
    assert_eq!(vanilla_count(&[2, 48, 96, 192], 3), 6_913_780);
}

#[test]
fn attention_parameters_match_formula() {
    let cfg = tiny(StackConfig::taa);
    let (_, store) = build(&ModelConfig::Prednet(cfg.clone()), 0);
    // Top layer: 8 channels, 2 heads × 1 channel on a 2×2 grid.
    let (d, per_head, heads, grid): (usize, usize, usize, (usize, usize)) = (8, 1, 2, (2, 2));
    let att = heads * (3 * d * per_head) + (heads * per_head).pow(2) + ((2 * grid.0 - 1) + (2 * grid.1 - 1)) * per_head + 2;
    assert_eq!(store.num_scalars_with_prefix("cell.2.att."), att);
    let removed = 4 * heads * per_head * d * 9;
    assert_eq!(store.num_scalars(), vanilla_count(&[2, 4, 8], 3) - removed + att);

    let cfg = tiny(StackConfig::saa);
    let (_, store) = build(&ModelConfig::Prednet(cfg), 0);
    // SAA attends over the cell input: 2·4 + 8 channels in layer 1, 2·8 in layer 2.
    let l1 = heads * (3 * 16 * 1) + 4 + (7 + 7) * 1;
    let l2 = heads * (3 * 16 * 1) + 4 + (3 + 3) * 1;
    assert_eq!(store.num_scalars_with_prefix("cell.1.att."), l1);
    assert_eq!(store.num_scalars_with_prefix("cell.2.att."), l2);
    assert!(store.id("cell.0.att.wo").is_none());
}

#[test]
fn variants_place_attention_in_the_upper_layers() {
    let v = StackConfig::vanilla(&[2, 4, 8, 16], (16, 16));
    assert!(v.cells.iter().all(|&k| k == CellKind::ConvLstm));
    let t = StackConfig::taa(&[2, 4, 8, 16], (16, 16));
    assert_eq!(t.cells, [CellKind::ConvLstm, CellKind::ConvLstm, CellKind::ConvLstm, CellKind::TaaConvLstm]);
    let s = StackConfig::saa(&[2, 4, 8, 16], (16, 16));
    assert_eq!(s.cells, [CellKind::ConvLstm, CellKind::ConvLstm, CellKind::SaaConvLstm, CellKind::SaaConvLstm]);
}

#[test]
fn swapping_the_top_cell_leaves_lower_layers_alone() {
    let (_, a) = build(&ModelConfig::Prednet(tiny(StackConfig::vanilla)), 3);
    let (_, b) = build(&ModelConfig::Prednet(tiny(StackConfig::taa)), 3);
    for name in a.names() {
        if name.starts_with("cell.0.") || name.starts_with("cell.1.") {
            assert_eq!(p(&a, name).data(), p(&b, name).data(), "{name}");
        } else if !name.starts_with("cell.2.") {
            assert_eq!(p(&a, name).shape(), p(&b, name).shape(), "{name}");
        }
    }
    let top = |s: &ParamStore<f64>| s.names().iter().filter(|n| n.starts_with("cell.2.")).count();
    assert!(top(&b) > top(&a));
}

#[test]
fn invalid_stacks_are_rejected() {
    let bad = [
        StackConfig::vanilla(&[3, 4], (8, 8)),
        StackConfig::vanilla(&[2, 4, 8], (6, 8)),
        StackConfig::vanilla(&[], (8, 8)),
        StackConfig {
            kernels: vec![3, 2],
            ..StackConfig::vanilla(&[2, 4], (8, 8))
        },
    ];
    for cfg in bad {
        assert!(Model::build::<f32>(&ModelConfig::Prednet(cfg), 0).is_err());
    }
}

#[test]
fn zero_network_predicts_empty_frames() {
    let cfg = ModelConfig::Prednet(tiny(StackConfig::taa));
    let (model, mut store) = build(&cfg, 1);
    for v in store.values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    let preds = model.predict(&store, &frames(2, 3, (8, 8)), 4, None).unwrap();
    assert_eq!(preds.len(), 4);
    for t in preds {
        assert_eq!(t.shape(), [2, 8, 8]);
        assert_eq!(t.max_abs(), 0.0);
    }
}

#[test]
fn step_bookkeeping_and_error_units() {
    let cfg = tiny(StackConfig::saa);
    let (model, store) = build(&ModelConfig::Prednet(cfg.clone()), 4);
    let Model::PredNet(net) = model else { unreachable!() };
    let xs = frames(5, 3, (8, 8));
    let g = Graph::new();
    let b = store.bind(&g, false);
    let mut state = net.init_state(&b).unwrap();
    for (t, x) in xs.iter().enumerate() {
        let input = (t < 2).then(|| g.constant(x.clone()));
        let (trace, next) = net.step(&b, input, &state, None).unwrap();
        for l in 0..3 {
            let (h, w) = cfg.layer_grid(l);
            let c = cfg.channels[l];
            assert_eq!(g.shape(trace.r[l]), [c, h, w]);
            assert_eq!(g.shape(trace.a[l]), [c, h, w]);
            assert_eq!(g.shape(trace.a_hat[l]), [c, h, w]);
            assert_eq!(g.shape(trace.e[l]), [2 * c, h, w]);
            assert!(g.value(trace.e[l]).data().iter().all(|&v| v >= 0.0));
            let a = g.value(trace.a[l]).clone();
            let ah = g.value(trace.a_hat[l]).clone();
            let want = concat0(&[&zip(&a, &ah, |x, y| (x - y).max(0.0)), &zip(&ah, &a, |x, y| (x - y).max(0.0))]);
            assert_eq!(max_abs_diff(&g.value(trace.e[l]), &want), 0.0);
        }
        let pred = g.value(trace.prediction).clone();
        assert_valid_mass(&pred);
        if t < 2 {
            assert_eq!(max_abs_diff(&g.value(trace.a[0]), x), 0.0);
        } else {
            // Without an observation the prediction is its own target.
            assert_eq!(g.value(trace.e[0]).max_abs(), 0.0);
        }
        // A_1 = maxpool(relu(conv(E_0))).
        let e0 = g.value(trace.e[0]).clone();
        let z = map(&conv(&e0, p(&store, "prednet.a.1.w"), Some(p(&store, "prednet.a.1.b"))), |v| v.max(0.0));
        let pooled = Tensor::from_fn(&[4, 4, 4], |i| {
            let (c, r, col) = (i / 16, (i / 4) % 4, i % 4);
            let at = |dr: usize, dc: usize| z.data()[(c * 8 + 2 * r + dr) * 8 + 2 * col + dc];
            at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1))
        });
        assert!(max_abs_diff(&g.value(trace.a[1]), &pooled) < 1e-12);
        state = next;
    }
}

#[test]
fn rollout_returns_recycled_predictions() {
    let cfg = tiny(StackConfig::taa);
    let (model, store) = build(&ModelConfig::Prednet(cfg), 6);
    let Model::PredNet(net) = &model else { unreachable!() };
    let xs = frames(7, 3, (8, 8));
    let preds = model.predict(&store, &xs, 2, None).unwrap();
    let g = Graph::new();
    let b = store.bind(&g, false);
    let mut state = net.init_state(&b).unwrap();
    let mut manual = Vec::new();
    for t in 0..5 {
        let input = xs.get(t).map(|x| g.constant(x.clone()));
        let (trace, next) = net.step(&b, input, &state, None).unwrap();
        if t >= 3 {
            manual.push(g.value(trace.prediction).clone());
        }
        state = next;
    }
    for (a, b) in preds.iter().zip(&manual) {
        assert_eq!(max_abs_diff(a, b), 0.0);
    }
}

#[test]
fn truncation_does_not_change_forward_values() {
    let cfg = ModelConfig::Prednet(tiny(StackConfig::taa));
    let (model, store) = build(&cfg, 8);
    let xs = frames(9, 3, (8, 8));
    let g = Graph::new();
    let b = store.bind(&g, false);
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let full = model.rollout(&b, &vars, 3, None).unwrap();
    let cut = model.rollout_truncated(&b, &vars, 3, None, Some(2)).unwrap();
    for (a, c) in full.iter().zip(&cut) {
        assert_eq!(max_abs_diff(&g.value(*a), &g.value(*c)), 0.0);
    }
}

#[test]
fn head_masks_are_checked_and_used() {
    let cfg = ModelConfig::Prednet(tiny(StackConfig::saa));
    let (model, store) = build(&cfg, 10);
    assert_eq!(model.attention_heads(), Some(2));
    let xs = frames(11, 2, (8, 8));
    assert!(model.predict(&store, &xs, 1, Some(&HeadMask::keep_all(3))).is_err());
    let all = model.predict(&store, &xs, 2, None).unwrap();
    let keep = model.predict(&store, &xs, 2, Some(&HeadMask::keep_all(2))).unwrap();
    let drop = model.predict(&store, &xs, 2, Some(&HeadMask::drop_one(2, 0))).unwrap();
    assert_eq!(max_abs_diff(&all[1], &keep[1]), 0.0);
    assert!(max_abs_diff(&all[1], &drop[1]) > 0.0);
}

#[test]
fn building_is_deterministic_in_the_seed() {
    let cfg = ModelConfig::Prednet(tiny(StackConfig::taa));
    let (m1, s1) = build(&cfg, 12);
    let (_, s2) = build(&cfg, 12);
    let (_, s3) = build(&cfg, 13);
    assert_eq!(s1.names(), s2.names());
    assert!(s1.values().iter().zip(s2.values()).all(|(a, b)| a.data() == b.data()));
    assert!(s1.values().iter().zip(s3.values()).any(|(a, b)| a.data() != b.data()));
    let xs = frames(14, 2, (8, 8));
    let a = m1.predict(&s1, &xs, 2, None).unwrap();
    let b = m1.predict(&s2, &xs, 2, None).unwrap();
    assert_eq!(a[1].data(), b[1].data());
}

#[test]
fn model_config_round_trips_through_json() {
    for cfg in [
        ModelConfig::Prednet(tiny(StackConfig::saa)),
        ModelConfig::Predrnn(PredRnnConfig::standard((32, 32))),
    ] {
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}

fn small_predrnn() -> PredRnnConfig {
    PredRnnConfig {
        hidden: vec![3, 3],
        kernel: 3,
        patch: 2,
        grid: (4, 4),
    }
}

#[test]
fn predrnn_shapes_and_step_count() {
    let cfg = small_predrnn();
    let (model, store) = build(&ModelConfig::Predrnn(cfg.clone()), 15);
    let Model::PredRnn(net) = &model else { unreachable!() };
    assert_eq!(p(&store, "predrnn.cell.0.w1.w").shape(), [9, 8 + 6, 3, 3]);
    assert_eq!(p(&store, "predrnn.head.w").shape(), [8, 3, 1, 1]);
    let xs = frames(16, 3, (4, 4));
    let preds = model.predict(&store, &xs, 2, None).unwrap();
    assert_eq!(preds.len(), 2);
    preds.iter().for_each(assert_valid_mass);
    // The first prediction is made while consuming the last input.
    let g = Graph::new();
    let b = store.bind(&g, false);
    let mut state = net.init_state(&g);
    let mut last = None;
    for x in &xs {
        let (pred, next) = net.step(&b, g.constant(x.clone()), &state).unwrap();
        last = Some(pred);
        state = next;
    }
    assert_eq!(max_abs_diff(&g.value(last.unwrap()), &preds[0]), 0.0);
    assert!(model.predict(&store, &xs, 1, Some(&HeadMask::keep_all(1))).is_err());
}

#[test]
fn predrnn_rejects_bad_configs() {
    let mut cfg = small_predrnn();
    cfg.patch = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = small_predrnn();
    cfg.hidden = vec![3, 4];
    assert!(cfg.validate().is_err());
    let mut cfg = small_predrnn();
    cfg.hidden = vec![3];
    assert!(cfg.validate().is_err());
    assert!(PredRnnConfig::standard((32, 32)).validate().is_ok());
}

#[test]
fn prednet_gradients() {
    let mut cfg = StackConfig::taa(&[2, 3], (4, 4));
    cfg.attention.n_heads = 1;
    cfg.attention.horizon = 2;
    let (model, mut store) = build(&ModelConfig::Prednet(cfg), 17);
    randomize(&mut store, &mut rng(18), 0.3);
    let xs = frames(19, 2, (4, 4));
    let report = module_gradcheck_floor(&store, &xs, 20, 1e-6, |b, x| {
        let preds = model.rollout(b, x, 2, None)?;
        Ok(b.graph().concat(&preds, 0)?)
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn predrnn_gradients() {
    let mut cfg = small_predrnn();
    cfg.hidden = vec![2, 2];
    let (model, mut store) = build(&ModelConfig::Predrnn(cfg), 21);
    randomize(&mut store, &mut rng(22), 0.3);
    let xs = frames(23, 2, (4, 4));
    let report = module_gradcheck_floor(&store, &xs, 24, 1e-6, |b, x| {
        let preds = model.rollout(b, x, 2, None)?;
        Ok(b.graph().concat(&preds, 0)?)
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_are_valid_masses(seed in 0u64..10_000, std in 0.05f64..1.5) {
        let mut stack = StackConfig::saa(&[2, 4], (4, 4));
        stack.attention.n_heads = 1;
        let cfg = ModelConfig::Prednet(stack);
        let (model, mut store) = Model::build::<f64>(&cfg, seed).unwrap();
        randomize(&mut store, &mut rng(seed), std);
        let preds = model.predict(&store, &frames(seed, 2, (4, 4)), 3, None).unwrap();
        for t in &preds {
            prop_assert!(t.all_finite());
            assert_valid_mass(t);
        }
    }
}
