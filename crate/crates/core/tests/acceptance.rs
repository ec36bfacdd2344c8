//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS / FAIL / SKIP line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use tripgrid::geo::*;
use tripgrid::ingest::*;
use tripgrid::lagrank::*;
use tripgrid::mask::*;
use tripgrid::predict::*;
use tripgrid::raster::*;
use tripgrid::split::*;
use tripgrid::stats::*;
use tripgrid::synth::*;

// Tolerances and budgets.
const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(1);
const WILCOXON_BUDGET: Duration = Duration::from_secs(10);
const UTM_TOL_M: f64 = 0.01;
const UTM_INVERSE_TOL_DEG: f64 = 1e-9;
const RECOVERY_SEEDS: u64 = 20;
const RECOVERY_MIN_HITS: usize = 19;
const RECOVERY_BUDGET: Duration = Duration::from_secs(300);
const COMPARE_ALPHA: f64 = 0.05;
const NI_MARGIN: f64 = 0.02;
const AUSTIN_KEPT: usize = 4_939_008;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("masked metric oracles", metric_oracles),
        ("split identity", split_identity),
        ("Wilcoxon exactness", wilcoxon_exactness),
        ("Holm correctness", holm_correctness),
        ("projection accuracy", projection_accuracy),
        ("rasterization conservation", rasterization_conservation),
        ("planted-lag recovery", planted_lag_recovery),
        ("proposed lags beat presets", proposed_beats_presets),
        ("ablation semantics", ablation_semantics),
        ("Austin integration", austin_integration),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {:>2} [{tag}] {name}: {detail} ({secs:.2}s)", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// 1 -------------------------------------------------------------------------

fn metric_oracles() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, cols) = (7, 5);
    let eps = 1e-8;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut m = [[0u8; 5]; 7];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_bool(0.6) as u8;
            }
        }
        m[rng.random_range(0..rows)][rng.random_range(0..cols)] = 1;
        let y: Vec<[[f64; 5]; 7]> = (0..2).map(|_| grid(&mut rng, |r| r.random_range(0..20) as f64)).collect();
        let yh: Vec<[[f64; 5]; 7]> = (0..2).map(|_| grid(&mut rng, |r| r.random_range(0.0..20.0))).collect();

        // Triple loops over (k, r, c) straight from the definitions.
        let mut omega = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                omega += f64::from(m[r][c]);
            }
        }
        let (mut se, mut ae, mut max_ae) = (0.0, 0.0, 0.0f64);
        let mut ybar = [0.0; 2];
        for k in 0..2 {
            for r in 0..rows {
                for c in 0..cols {
                    let w = f64::from(m[r][c]);
                    let e = yh[k][r][c] - y[k][r][c];
                    se += w * e * e;
                    ae += w * e.abs();
                    if m[r][c] == 1 {
                        max_ae = max_ae.max(e.abs());
                    }
                    ybar[k] += w * y[k][r][c];
                }
            }
            ybar[k] /= omega;
        }
        let mut ss = 0.0;
        for k in 0..2 {
            for r in 0..rows {
                for c in 0..cols {
                    ss += f64::from(m[r][c]) * (y[k][r][c] - ybar[k]).powi(2);
                }
            }
        }
        let want = [se / (2.0 * omega), ae / (2.0 * omega), max_ae, 1.0 - se / (ss + eps)];

        let cells: Vec<u32> = (0..rows * cols).filter(|&i| m[i / cols][i % cols] == 1).map(|i| i as u32).collect();
        let mask = ActivityMask::from_indices(rows, cols, cells).unwrap();
        let flat = |g: &[[f64; 5]; 7]| g.iter().flatten().copied().collect::<Vec<f64>>();
        let target = TargetPair { rows, cols, pickup: flat(&y[0]), dropoff: flat(&y[1]) };
        let got = masked_metrics((&flat(&yh[0]), &flat(&yh[1])), &target, &mask, &EvalConfig { epsilon: eps }).unwrap();
        for (g, w) in [got.mse, got.mae, got.max_ae, got.r2].into_iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    let dt = t0.elapsed();
    check(
        worst <= METRIC_TOL && dt < METRIC_BUDGET,
        format!("200 instances, max |error| {worst:.2e} (tol {METRIC_TOL:e}), {dt:.2?} (budget {METRIC_BUDGET:?})"),
    )
}

fn grid(rng: &mut ChaCha8Rng, mut f: impl FnMut(&mut ChaCha8Rng) -> f64) -> [[f64; 5]; 7] {
    let mut g = [[0.0; 5]; 7];
    for row in g.iter_mut() {
        for v in row.iter_mut() {
            *v = f(rng);
        }
    }
    g
}

// 2 -------------------------------------------------------------------------

fn split_identity() -> Verdict {
    let spec = SplitSpec { lookback: 504, buffer: 1, fractions: AUSTIN_FRACTIONS };
    let cands = enumerate_samples(8760, spec.lookback, Horizon::NextHour).unwrap();
    let a = split_samples(&cands, &spec).unwrap();
    let sizes = [a.train.len(), a.val.len(), a.test.len()];
    let leak = verify_no_leakage(&a, spec.lookback);
    let gaps: Vec<i64> = leak.gaps.iter().map(|g| g.2).collect();
    check(
        cands.len() == 8256 && sizes == [3743, 1752, 1753] && a.len() == 7248 && gaps == [505, 505] && leak.pass,
        format!("candidates {}, sizes {sizes:?}, total {}, gaps {gaps:?}", cands.len(), a.len()),
    )
}

// 3 -------------------------------------------------------------------------

fn wilcoxon_exactness() -> Verdict {
    let t0 = Instant::now();
    let mut mismatches = 0usize;
    let mut patterns = 0usize;
    for n in 1..=10usize {
        // Null distribution of W⁺ by enumerating all 2ⁿ sign patterns.
        let total = 1usize << n;
        let mut count = vec![0u64; n * (n + 1) / 2 + 1];
        for signs in 0..total {
            let w: usize = (1..=n).filter(|k| signs >> (k - 1) & 1 == 1).sum();
            count[w] += 1;
        }
        for signs in 0..total {
            patterns += 1;
            let d: Vec<f64> = (1..=n).map(|k| if signs >> (k - 1) & 1 == 1 { k as f64 } else { -(k as f64) }).collect();
            let w: usize = (1..=n).filter(|k| signs >> (k - 1) & 1 == 1).sum();
            let le = count[..=w].iter().sum::<u64>() as f64 / total as f64;
            let ge = count[w..].iter().sum::<u64>() as f64 / total as f64;
            for (alt, want) in [
                (Alternative::Less, le),
                (Alternative::Greater, ge),
                (Alternative::TwoSided, (2.0 * le.min(ge)).min(1.0)),
            ] {
                if wilcoxon_signed_rank(&d, alt).unwrap().p != want {
                    mismatches += 1;
                }
            }
        }
    }
    let p123 = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], Alternative::TwoSided).unwrap().p;
    let dt = t0.elapsed();
    check(
        mismatches == 0 && p123 == 0.25 && dt < WILCOXON_BUDGET,
        format!("{patterns} sign patterns × 3 alternatives, {mismatches} mismatches; d=[1,2,3] two-sided p = {p123}; {dt:.2?}"),
    )
}

// 4 -------------------------------------------------------------------------

fn holm_correctness() -> Verdict {
    let h = holm_correct(&[0.01, 0.02, 0.04], 0.05).unwrap();
    let example = h.adjusted.iter().zip([0.03, 0.04, 0.04]).all(|(a, b)| (a - b).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..25);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let adj = holm_correct(&p, 0.05).unwrap().adjusted;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        violations += order.windows(2).filter(|w| adj[w[0]] > adj[w[1]]).count();
    }
    check(
        example && violations == 0,
        format!("[0.01,0.02,0.04] → {:?}; monotonicity violations over 1000 vectors: {violations}", h.adjusted),
    )
}

// 5 -------------------------------------------------------------------------

fn projection_accuracy() -> Verdict {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/utm_zone14_oracle.csv");
    let mut reader = csv::Reader::from_path(path).unwrap();
    let spec = ProjectionSpec::default();
    let (mut n, mut worst_m, mut worst_deg) = (0usize, 0.0f64, 0.0f64);
    for rec in reader.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = rec.iter().map(|s| s.parse().unwrap()).collect();
        let (lat, lon, e, nn) = (v[0], v[1], v[2], v[3]);
        let (x, y) = wgs84_to_utm(lat, lon, &spec).unwrap();
        worst_m = worst_m.max((x - e).abs()).max((y - nn).abs());
        let (lat2, lon2) = utm_to_wgs84(x, y, &spec).unwrap();
        worst_deg = worst_deg.max((lat2 - lat).abs()).max((lon2 - lon).abs());
        n += 1;
    }
    check(
        n >= 100 && worst_m <= UTM_TOL_M && worst_deg <= UTM_INVERSE_TOL_DEG,
        format!("{n} points: max forward error {worst_m:.2e} m (tol {UTM_TOL_M}), max round-trip error {worst_deg:.2e}° (tol {UTM_INVERSE_TOL_DEG:e})"),
    )
}

// 6 -------------------------------------------------------------------------

fn rasterization_conservation() -> Verdict {
    let mut bad = Vec::new();
    let mut total = 0usize;
    for seed in 0..50u64 {
        let cfg = SynthConfig { seed, weeks: 2, tract_rows: 4, tract_cols: 5, base_rate: 2.0, ..SynthConfig::default() };
        let out = generate(&cfg).unwrap();
        let store = out.frame_store(DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
        total += out.trips.len();
        if store.total_pickups() != out.trips.len() as u64 {
            bad.push(seed);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (rows, cols) = (13, 11);
    let mut values: Vec<u32> = (0..rows * cols).map(|_| if rng.random_bool(0.3) { rng.random_range(0..=65535) } else { 0 }).collect();
    values[0] = 65535;
    values[rows * cols - 1] = 65535;
    let img = CountImage::from_dense(rows, cols, &values).unwrap();
    let (back, _) = decode_png16(&encode_png16(&img, &[]).unwrap()).unwrap();
    let png_ok = back.to_dense() == values;

    check(
        bad.is_empty() && png_ok,
        format!("50 runs, {total} trips, pickup-sum mismatches {bad:?}; PNG round trip with 65535 exact: {png_ok}"),
    )
}

// 7 -------------------------------------------------------------------------

fn planted_lag_recovery() -> Verdict {
    let t0 = Instant::now();
    let mut hits = 0usize;
    let mut misses = Vec::new();
    for seed in 0..RECOVERY_SEEDS {
        let cfg = SynthConfig { seed, weeks: 8, daily_amp: 0.8, weekly_amp: 0.5, ..SynthConfig::default() };
        let store = generate(&cfg).unwrap().frame_store(DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
        let m = build_mask(&store);
        let series = MaskedSeries::new(&store, &m).unwrap();
        // Eight weeks cannot host a 504-hour lookback plus two 505-hour
        // gaps, so the ranking uses every candidate target.
        let targets = enumerate_samples(store.len(), 504, Horizon::NextHour).unwrap();
        let metrics = lag_metrics(&series, &targets, &lag_universe(Horizon::NextHour, 504)).unwrap();
        let order = rank_lags(&metrics, &LagMetric::DEFAULT).unwrap().ordered_lags();
        if order[..5].contains(&24) && order[..5].contains(&168) {
            hits += 1;
        } else {
            misses.push((seed, order[..5].to_vec()));
        }
    }
    let dt = t0.elapsed();
    check(
        hits >= RECOVERY_MIN_HITS && dt < RECOVERY_BUDGET,
        format!("τ=24 and τ=168 in top-5 for {hits}/{RECOVERY_SEEDS} seeds (need {RECOVERY_MIN_HITS}); misses {misses:?}; {dt:.1?}"),
    )
}

// 8 -------------------------------------------------------------------------

fn proposed_beats_presets() -> Verdict {
    let cfg = SynthConfig { seed: 8, weeks: 16, ..SynthConfig::default() };
    let store = generate(&cfg).unwrap().frame_store(DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
    let m = build_mask(&store);
    let series = MaskedSeries::new(&store, &m).unwrap();
    let tcfg = TestConfig { alpha: COMPARE_ALPHA, ..TestConfig::default() };
    let mut ok = true;
    let mut detail = Vec::new();
    for h in [Horizon::NextHour, Horizon::Next24h] {
        let cands = enumerate_samples(store.len(), 504, h).unwrap();
        let a = split_samples(&cands, &SplitSpec::default()).unwrap();
        let metrics = lag_metrics(&series, &a.train, &lag_universe(h, 504)).unwrap();
        let ranking = rank_lags(&metrics, &LagMetric::DEFAULT).unwrap();
        let n = Preset::default_len(h);
        let mut configs = vec![("proposed".to_string(), top_k(&ranking, n).unwrap())];
        configs.extend(Preset::ALL.map(|p| (p.as_str().to_string(), p.lags(h, n))));
        let c = compare_configs(&configs, &PredictorSpec::default(), &series, &a.train, &a.test, &tcfg).unwrap();
        for p in Preset::ALL {
            let t = c.test("proposed", p.as_str()).unwrap();
            let wins = t.reject && t.better() == Some("proposed");
            ok &= wins;
            detail.push(format!(
                "{} vs {}: MSE {:.3} vs {:.3}, p_holm {:.2e}",
                h.as_str(),
                p.as_str(),
                c.summary("proposed").unwrap().mean.mse,
                c.summary(p.as_str()).unwrap().mean.mse,
                t.p_adj
            ));
        }
    }
    check(ok, detail.join("; "))
}

// 9 -------------------------------------------------------------------------

fn ablation_semantics() -> Verdict {
    // y_t = e_t + e_{t−24} with e Poisson: only τ = 24 carries information
    // about y_t among {5, 7, 11, 24}.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (support, len) = (40, 1600);
    let pois = Poisson::new(4.0).unwrap();
    let noise = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..len).map(|_| (0..support).map(|_| pois.sample(rng)).collect()).collect() };
    let ma = |e: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..len).map(|t| (0..support).map(|i| e[t][i] + if t >= 24 { e[t - 24][i] } else { 0.0 }).collect()).collect()
    };
    let (ep, ed) = (noise(&mut rng), noise(&mut rng));
    let series = MaskedSeries::from_vectors(support, ma(&ep), ma(&ed)).unwrap();

    let taus = [5, 7, 11, 24];
    let train: Vec<SampleIndex> = (48..1000).map(|target| SampleIndex { target, horizon: Horizon::NextHour }).collect();
    let val: Vec<SampleIndex> = (1100..len).map(|target| SampleIndex { target, horizon: Horizon::NextHour }).collect();
    let ranking = rank_lags(&lag_metrics(&series, &train, &taus).unwrap(), &LagMetric::DEFAULT).unwrap();
    let first = ranking.ordered_lags()[0];

    let cfg = TestConfig { margin_fraction: NI_MARGIN, ..TestConfig::default() };
    let run = || ablate_depth(&ranking, taus.len(), &PredictorSpec::default(), &series, &train, &val, &cfg).unwrap();
    let a = run();
    let deterministic = a == run();
    let two = a.depth(2).unwrap().mean_mse;
    let best = a.depth(a.min_mse_channels).unwrap().mean_mse;
    let ni_ok = a.min_mse_channels == 2 || a.ni_for(2).is_some_and(|t| t.reject);
    check(
        first == 24 && a.minimal_ni_channels == 2 && two <= best * (1.0 + NI_MARGIN) && ni_ok && deterministic,
        format!(
            "top lag {first}; min-MSE {}ch ({best:.4}), minimal NI {}ch ({two:.4}, +{:.2}%); deterministic {deterministic}",
            a.min_mse_channels,
            a.minimal_ni_channels,
            100.0 * (two / best - 1.0)
        ),
    )
}

// 10 ------------------------------------------------------------------------

/// Expects `trips.csv` (City of Austin export), `tracts.geojson` and
/// `boundary.geojson` in `$TRIPGRID_AUSTIN_DIR`; the tract id property is
/// `$TRIPGRID_AUSTIN_GEOID_KEY` (default `GEOID10`).
fn austin_integration() -> Verdict {
    let Some(dir) = std::env::var_os("TRIPGRID_AUSTIN_DIR").map(PathBuf::from) else {
        return Verdict::Skip("TRIPGRID_AUSTIN_DIR not set".into());
    };
    let files = ["trips.csv", "tracts.geojson", "boundary.geojson"].map(|f| dir.join(f));
    if let Some(missing) = files.iter().find(|p| !p.exists()) {
        return Verdict::Skip(format!("{} not found", missing.display()));
    }
    let key = std::env::var("TRIPGRID_AUSTIN_GEOID_KEY").unwrap_or_else(|_| "GEOID10".into());
    let spec = ProjectionSpec::default();

    let parsed = parse_trips(std::fs::File::open(&files[0]).unwrap(), &TripSchema::austin()).unwrap();
    let (kept, mut report) = filter_trips_parallel(&parsed.rows, &FilterConfig::default(), 100_000);
    report.record_parse_errors(parsed.errors.len());
    let tracts = read_polygons_geojson(std::fs::File::open(&files[1]).unwrap(), &key).unwrap();
    let boundary = read_boundary_geojson(std::fs::File::open(&files[2]).unwrap()).unwrap();
    let (table, _) = build_centroid_table(&tracts, &spec).unwrap();
    let (located, rej) = geolocate_trips(&kept, &table, Some(&boundary), BoundaryMode::Centroid);
    report.reject_kept(RejectReason::UnresolvedGeoid, rej.unresolved_geoid);
    report.reject_kept(RejectReason::OutsideBoundary, rej.outside_boundary);

    let (x0, y0, x1, y1) = projected_bounds(&boundary, &spec).unwrap();
    let g = GridSpec::from_bounds(x0, y0, x1, y1, DEFAULT_CELL_W, DEFAULT_CELL_H).unwrap();
    let first = chrono::NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
    let last = chrono::NaiveDate::from_ymd_opt(2019, 12, 31).unwrap();
    let store = rasterize_range(&located, &g, first, last, DstRule::UnitedStates).unwrap();
    let m = build_mask(&store);
    let series = MaskedSeries::new(&store, &m).unwrap();
    let a = split_samples(&enumerate_samples(store.len(), 504, Horizon::NextHour).unwrap(), &SplitSpec::default()).unwrap();
    let metrics = lag_metrics(&series, &a.train, &lag_universe(Horizon::NextHour, 504)).unwrap();
    let mut top3 = rank_lags(&metrics, &LagMetric::DEFAULT).unwrap().ordered_lags()[..3].to_vec();
    top3.sort_unstable();

    check(
        located.len() == AUSTIN_KEPT && store.len() == 8760 && top3 == [1, 24, 168],
        format!(
            "kept {} (want {AUSTIN_KEPT}), retention {:.4}, frames 2×{}, top-3 {top3:?}",
            located.len(),
            report.retention_ratio(),
            store.len()
        ),
    )
}
