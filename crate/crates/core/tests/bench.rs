use gridcast::bench::{bench_temporal_attention, BenchConfig};

#[test]
fn one_row_per_horizon() {
    let cfg = BenchConfig {
        grid: 4,
        channels: 4,
        n_heads: 2,
        horizons: vec![1, 3],
        runs: 3,
        seed: 1,
    };
    let rows = bench_temporal_attention(&cfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), [1, 3]);
    for r in &rows {
        assert!(r.min_s <= r.median_s && r.median_s <= r.max_s);
        assert!(r.min_s > 0.0);
    }
}

#[test]
fn bad_sizes_are_rejected() {
    let ok = BenchConfig::default();
    for cfg in [
        BenchConfig { runs: 0, ..ok.clone() },
        BenchConfig { horizons: vec![], ..ok.clone() },
        BenchConfig { horizons: vec![0], ..ok.clone() },
        BenchConfig { channels: 30, ..ok.clone() },
    ] {
        assert!(bench_temporal_attention(&cfg).is_err());
    }
}
