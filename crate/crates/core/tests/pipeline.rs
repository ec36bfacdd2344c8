use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tripgrid::lagrank::*;
use tripgrid::mask::*;
use tripgrid::predict::*;
use tripgrid::raster::*;
use tripgrid::split::*;
use tripgrid::synth::*;

fn small(seed: u64) -> SynthConfig {
    SynthConfig { seed, weeks: 2, tract_rows: 3, tract_cols: 4, base_rate: 3.0, ..SynthConfig::default() }
}

#[test]
fn synth_csv_and_geojson_are_byte_identical_per_seed() {
    let bytes = |cfg: &SynthConfig| {
        let out = generate(cfg).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        out.write_trips_csv(&mut a).unwrap();
        out.write_tracts_geojson(&mut b).unwrap();
        (a, b)
    };
    assert_eq!(bytes(&small(5)), bytes(&small(5)));
    assert_ne!(bytes(&small(5)).0, bytes(&small(6)).0);
}

#[test]
fn four_weeks_have_672_slots_per_tract() {
    let cfg = SynthConfig { weeks: 4, ..small(1) };
    let out = generate(&cfg).unwrap();
    assert_eq!(out.counts.len(), 4 * 7 * 24 * cfg.n_tracts());
    assert_eq!(out.hourly_totals().len(), 672);
}

#[test]
fn hour_of_day_demand_matches_configured_rate() {
    // Without drift or extra dispersion every count is Poisson with the
    // closed-form harmonic rate, so per-hour-of-day totals are Poisson with
    // the summed rate: Pearson χ² with 24 degrees of freedom.
    let cfg = SynthConfig { seed: 3, weeks: 4, drift_sd: 0.0, dispersion: 0.0, daily_amp: 0.8, weekly_amp: 0.5, ..SynthConfig::default() };
    let out = generate(&cfg).unwrap();
    let n = cfg.hours();
    let mut observed = [0.0f64; 24];
    let mut expected = [0.0f64; 24];
    for (tract, counts) in out.tracts.iter().zip(out.counts.chunks(n)) {
        for (h, &c) in counts.iter().enumerate() {
            observed[h % 24] += f64::from(c);
            expected[h % 24] += cfg.harmonic_rate(tract, h);
        }
    }
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(24.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "χ² = {chi2}, p = {p}");
}

#[test]
fn every_generated_trip_lands_in_a_frame() {
    for seed in 0..5 {
        let out = generate(&small(seed)).unwrap();
        let store = out.frame_store(DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
        assert_eq!(store.total_pickups(), out.trips.len() as u64);
        let per_hour: Vec<u64> = store.frames().iter().map(|f| f.pickup.sum()).collect();
        assert_eq!(per_hour, out.hourly_totals());
        // Trips that end after the last generated hour are the only drop-off loss.
        let late = out.trips.iter().filter(|t| t.end_time.date() > out.config.last_day()).count() as u64;
        assert_eq!(store.total_dropoffs() + late, out.trips.len() as u64);
    }
}

#[test]
fn mask_covers_every_active_cell() {
    let out = generate(&small(2)).unwrap();
    let store = out.frame_store(DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
    let m = build_mask(&store);
    let (rows, cols) = store.grid().shape();
    let mut active = vec![false; rows * cols];
    for f in store.frames() {
        for (i, v) in f.pickup.to_dense().into_iter().zip(f.dropoff.to_dense()).enumerate() {
            active[i] |= v.0 > 0 || v.1 > 0;
        }
    }
    assert_eq!(m.active_count(), active.iter().filter(|&&a| a).count());
    assert!(m.cells().iter().all(|&(r, c)| active[r * cols + c]));
    assert_eq!(m.to_dense().iter().map(|&v| v as usize).sum::<usize>(), m.active_count());
}

fn metrics_row(tau: usize, v: [f64; 4]) -> LagMetrics {
    LagMetrics { tau, c_s: v[0], c_c: v[1], mae_s: v[2], mae_var: v[3], ad_s: v[2] * 10.0, n_valid: 1, n_valid_cs: 1, n_valid_cc: 1 }
}

proptest! {
    #[test]
    fn split_gaps_and_sizes(total in 1200usize..9000, lookback in 24usize..505, buffer in 1usize..3, f0 in 0.2f64..0.6, f1 in 0.1f64..0.3) {
        let spec = SplitSpec { lookback, buffer, fractions: [f0, f1, 1.0 - f0 - f1] };
        let cands = enumerate_samples(total, lookback, Horizon::NextHour).unwrap();
        prop_assert_eq!(cands.len(), total - lookback);
        if let Ok(a) = split_samples(&cands, &spec) {
            prop_assert_eq!(a.len(), cands.len() - 2 * spec.gap_removed());
            let leak = verify_no_leakage(&a, lookback);
            prop_assert!(leak.pass);
            for g in &leak.gaps {
                prop_assert_eq!(g.2, (lookback + buffer) as i64);
            }
        }
    }

    #[test]
    fn ranking_is_a_permutation_with_exact_rank_sums(
        scores in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..5.0, 0.0f64..2.0), 2..60),
        quantize in any::<bool>(),
    ) {
        // Quantizing forces plenty of ties.
        let q = |v: f64| if quantize { (v * 4.0).round() / 4.0 } else { v };
        let metrics: Vec<LagMetrics> = scores.iter().enumerate().map(|(i, s)| metrics_row(i + 1, [q(s.0), q(s.1), q(s.2), s.3])).collect();
        let n = metrics.len();
        let r = rank_lags(&metrics, &LagMetric::DEFAULT).unwrap();
        let mut finals: Vec<usize> = r.rows.iter().map(|x| x.rank_final).collect();
        finals.sort_unstable();
        prop_assert_eq!(finals, (1..=n).collect::<Vec<_>>());
        for m in 0..LagMetric::DEFAULT.len() {
            let s: f64 = r.rows.iter().map(|x| x.ranks[m]).sum();
            prop_assert!((s - (n * (n + 1)) as f64 / 2.0).abs() < 1e-9);
        }
        // Final order never contradicts the averaged ranks.
        let by = r.by_rank();
        for w in by.windows(2) {
            prop_assert!(w[0].rank_avg <= w[1].rank_avg);
        }
    }

    #[test]
    fn ranking_ignores_ad_s_by_default(scale in 0.1f64..10.0) {
        // AD_s is proportional to MAE_s on a fixed support, so adding it to
        // the metric set leaves the order of a tie-free ranking unchanged.
        let metrics: Vec<LagMetrics> = (1..30usize)
            .map(|t| metrics_row(t, [1.0 / t as f64, 0.5 / t as f64, t as f64 * scale, 0.1]))
            .collect();
        let a = rank_lags(&metrics, &LagMetric::DEFAULT).unwrap().ordered_lags();
        let b = rank_lags(&metrics, &LagMetric::ALL).unwrap().ordered_lags();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metric_bounds(values in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0), 1..40)) {
        let yp: Vec<f64> = values.iter().map(|v| v.0).collect();
        let yd: Vec<f64> = values.iter().map(|v| v.1).collect();
        let pp: Vec<f64> = values.iter().map(|v| v.2).collect();
        let pd: Vec<f64> = values.iter().map(|v| v.3).collect();
        let m = metrics_on_support([&pp, &pd], [&yp, &yd], &EvalConfig::default()).unwrap();
        prop_assert!(m.mse >= 0.0);
        prop_assert!(m.max_ae + 1e-12 >= m.mae);
        prop_assert!(m.mae * m.mae <= m.mse + 1e-9);
        prop_assert!(m.r2 <= 1.0);
        let perfect = metrics_on_support([&yp, &yd], [&yp, &yd], &EvalConfig::default()).unwrap();
        prop_assert_eq!(perfect.mse, 0.0);
        prop_assert_eq!(perfect.r2, 1.0);
    }

    #[test]
    fn png_round_trip_is_lossless(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let mut s = seed;
        let values: Vec<u32> = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                match s >> 62 { 0 => 0, 1 => 65535, _ => ((s >> 20) & 0xffff) as u32 }
            })
            .collect();
        let img = CountImage::from_dense(rows, cols, &values).unwrap();
        let (back, _) = decode_png16(&encode_png16(&img, &[]).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), (rows, cols));
        prop_assert_eq!(back.to_dense(), values);
    }
}

#[test]
fn planted_daily_lag_outranks_neighbours_on_small_store() {
    let cfg = SynthConfig { seed: 11, weeks: 4, ..SynthConfig::default() };
    let store = generate(&cfg).unwrap().frame_store(DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
    let m = build_mask(&store);
    let series = MaskedSeries::new(&store, &m).unwrap();
    let targets = enumerate_samples(store.len(), 168, Horizon::NextHour).unwrap();
    let metrics = lag_metrics(&series, &targets, &lag_universe(Horizon::NextHour, 168)).unwrap();
    let r = rank_lags(&metrics, &LagMetric::DEFAULT).unwrap();
    let (r24, r168) = (r.rank_of(24).unwrap(), r.rank_of(168).unwrap());
    for tau in [12, 36, 84, 100, 120] {
        let other = r.rank_of(tau).unwrap();
        assert!(r24 < other && r168 < other, "τ=24 #{r24}, τ=168 #{r168}, τ={tau} #{other}");
    }
}
