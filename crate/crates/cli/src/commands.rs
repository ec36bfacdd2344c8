use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use tripgrid::geo::{
    build_centroid_table, geolocate_trips, projected_bounds, read_boundary_geojson, read_located_csv,
    read_polygons_geojson, write_located_csv, LocatedTrip,
};
use tripgrid::ingest::{filter_trips_parallel, parse_trips, trip_summary, write_trips_csv, RejectReason};
use tripgrid::lagrank::{lag_metrics, lag_universe, rank_lags, top_k, LagRanking, Preset};
use tripgrid::mask::{build_mask, read_mask, write_mask, MaskedSeries};
use tripgrid::predict::{evaluate, training_norm_factor, Trainer};
use tripgrid::raster::{rasterize_range, read_store, write_store, FrameStore, GridSpec};
use tripgrid::split::{
    enumerate_samples, exclude_missing, read_assignment_csv, split_samples, verify_no_leakage, write_assignment_csv,
    Horizon, SplitAssignment, SUBSET_NAMES,
};
use tripgrid::stats::{ablate_depth, compare_configs, write_results_csv, Comparison, ConfigSummary};
use tripgrid::synth::generate;

use crate::config::{config_err, RunConfig};
use crate::work::{create, write_text, Work};

/// Partition size for parallel trip filtering.
const FILTER_CHUNK: usize = 1 << 16;

fn lag_list(lags: &[usize]) -> String {
    lags.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

fn existing(path: &Path, what: &str) -> anyhow::Result<PathBuf> {
    if !path.exists() {
        return Err(config_err(format!("{what} {} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}

/// Configured input path, or the synthetic default written by `synth`.
fn input(configured: &Option<PathBuf>, work: &Work, default: &str, what: &str) -> anyhow::Result<PathBuf> {
    match configured {
        Some(p) => existing(p, what),
        None => work.require(work.synth_dir().join(default), &format!("synth` or pass --{what} to `ingest"))
    }
}

pub fn synth(cfg: &RunConfig, work: &Work, out: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out.unwrap_or_else(|| work.synth_dir());
    let data = generate(&cfg.synth)?;
    let mut w = create(&out.join("trips.csv"))?;
    data.write_trips_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("tracts.geojson"))?;
    data.write_tracts_geojson(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("boundary.geojson"))?;
    data.write_boundary_geojson(&mut w)?;
    w.flush()?;
    write_text(&out.join("synth_config.toml"), &toml::to_string(&cfg.synth)?)?;
    println!(
        "synth: {} trips, {} tracts, {} hours from {} -> {}",
        data.trips.len(),
        data.polygons.len(),
        cfg.synth.hours(),
        cfg.synth.start,
        out.display()
    );
    Ok(())
}

pub fn ingest(cfg: &RunConfig, work: &Work) -> anyhow::Result<()> {
    let trips_path = input(&cfg.paths.trips, work, "trips.csv", "trips")?;
    let tracts_path = input(&cfg.paths.tracts, work, "tracts.geojson", "tracts")?;
    let boundary_path = match &cfg.paths.boundary {
        Some(p) => Some(existing(p, "boundary")?),
        None if cfg.paths.tracts.is_none() => Some(work.synth_dir().join("boundary.geojson")).filter(|p| p.exists()),
        None => None,
    };
    cfg.filter.validate()?;

    let parsed = parse_trips(BufReader::new(File::open(&trips_path)?), &cfg.schema)
        .with_context(|| format!("reading {}", trips_path.display()))?;
    let (kept, mut report) = filter_trips_parallel(&parsed.rows, &cfg.filter, FILTER_CHUNK);
    report.record_parse_errors(parsed.errors.len());

    let tracts = read_polygons_geojson(BufReader::new(File::open(&tracts_path)?), &cfg.paths.geoid_key)
        .with_context(|| format!("reading {}", tracts_path.display()))?;
    let (table, warnings) = build_centroid_table(&tracts, &cfg.projection)?;
    let boundary = match &boundary_path {
        Some(p) => Some(read_boundary_geojson(BufReader::new(File::open(p)?)).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let (located, rej) = geolocate_trips(&kept, &table, boundary.as_deref(), cfg.grid.boundary_mode);
    report.reject_kept(RejectReason::UnresolvedGeoid, rej.unresolved_geoid);
    report.reject_kept(RejectReason::OutsideBoundary, rej.outside_boundary);
    let located_rows: HashSet<usize> = located.iter().map(|t| t.row_index).collect();
    let final_kept: Vec<_> = kept.into_iter().filter(|t| located_rows.contains(&t.row_index)).collect();
    report.summary = trip_summary(&final_kept).ok();

    let mut w = create(&work.path("kept_trips.csv"))?;
    write_trips_csv(&final_kept, &parsed.extra_columns, &mut w)?;
    w.flush()?;
    let mut w = create(&work.path("parse_errors.csv"))?;
    writeln!(w, "row_index,reason")?;
    for e in &parsed.errors {
        writeln!(w, "{},{}", e.row_index, e.reason)?;
    }
    w.flush()?;
    let mut w = create(&work.path("filter_report.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    write_text(&work.path("filter_report.txt"), &report.to_string())?;
    let mut w = create(&work.path("centroids.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&work.path("centroid_warnings.csv"))?;
    writeln!(w, "geoid,message")?;
    for x in &warnings {
        writeln!(w, "{},\"{}\"", x.geoid, x.message.replace('"', "'"))?;
    }
    w.flush()?;
    let mut w = create(&work.located())?;
    write_located_csv(&located, &mut w)?;
    w.flush()?;

    // Grid extent: the municipal boundary when given, else the trip ends.
    let (source, b) = match &boundary {
        Some(poly) => ("boundary", projected_bounds(poly, &cfg.projection)?),
        None if located.is_empty() => bail!("no trip survived filtering and geolocation"),
        None => ("trips", trip_extent(&located)),
    };
    write_text(&work.extent(), &format!("source,min_x,min_y,max_x,max_y\n{source},{},{},{},{}\n", b.0, b.1, b.2, b.3))?;

    print!("{report}");
    println!("located trips: {} ({} tracts, {} centroid warnings)", located.len(), table.len(), warnings.len());
    Ok(())
}

fn trip_extent(trips: &[LocatedTrip]) -> (f64, f64, f64, f64) {
    trips.iter().flat_map(|t| [t.origin, t.dest]).fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |b, (x, y)| (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y)),
    )
}

fn read_extent(work: &Work) -> anyhow::Result<(String, [f64; 4])> {
    let mut r = csv::Reader::from_reader(work.open(work.extent(), "ingest")?);
    let rec = r.records().next().context("extent.csv is empty")??;
    let num = |i: usize| -> anyhow::Result<f64> { rec.get(i).and_then(|s| s.parse().ok()).context("bad extent.csv") };
    Ok((rec.get(0).unwrap_or_default().to_string(), [num(1)?, num(2)?, num(3)?, num(4)?]))
}

pub fn rasterize(cfg: &RunConfig, work: &Work) -> anyhow::Result<()> {
    let located = read_located_csv(work.open(work.located(), "ingest")?)?;
    let (source, [x0, y0, x1, y1]) = read_extent(work)?;
    let (cw, ch) = (cfg.grid.cell_w, cfg.grid.cell_h);
    let grid = if source == "boundary" {
        GridSpec::from_bounds(x0, y0, x1, y1, cw, ch)?
    } else {
        GridSpec::covering_points([(x0, y0), (x1, y1)], cw, ch)?
    };
    let first = match cfg.grid.first_day {
        Some(d) => d,
        None => located.iter().map(|t| t.start_time.date()).min().context("no located trips to rasterize")?,
    };
    let last = match cfg.grid.last_day {
        Some(d) => d,
        None => located.iter().map(|t| t.start_time.date()).max().context("no located trips to rasterize")?,
    };
    let store = rasterize_range(&located, &grid, first, last, cfg.grid.dst)?;
    write_store(&store, &work.frames())?;

    let t = store.tally;
    let missing = store.frames().iter().filter(|f| f.missing).count();
    let rows = [
        ("grid_rows", grid.rows.to_string()),
        ("grid_cols", grid.cols.to_string()),
        ("cell_w_m", grid.cell_w.to_string()),
        ("cell_h_m", grid.cell_h.to_string()),
        ("first_day", first.to_string()),
        ("last_day", last.to_string()),
        ("hours", store.len().to_string()),
        ("missing_hours", missing.to_string()),
        ("pickups", store.total_pickups().to_string()),
        ("dropoffs", store.total_dropoffs().to_string()),
        ("pickup_out_of_grid", t.pickup_out_of_grid.to_string()),
        ("dropoff_out_of_grid", t.dropoff_out_of_grid.to_string()),
        ("pickup_out_of_range", t.pickup_out_of_range.to_string()),
        ("dropoff_out_of_range", t.dropoff_out_of_range.to_string()),
        ("in_missing_hour", t.in_missing_hour.to_string()),
    ];
    let mut csv_text = String::from("item,value\n");
    let mut text = String::from("Rasterization report\n");
    for (k, v) in &rows {
        let _ = writeln!(csv_text, "{k},{v}");
        let _ = writeln!(text, "  {k:<22}{v:>14}");
    }
    write_text(&work.path("raster_report.csv"), &csv_text)?;
    write_text(&work.path("raster_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn load_store(work: &Work) -> anyhow::Result<FrameStore> {
    let dir = work.require(work.frames(), "rasterize")?;
    work.require(dir.join("manifest.csv"), "rasterize")?;
    Ok(read_store(&dir)?)
}

pub fn mask(work: &Work) -> anyhow::Result<()> {
    let store = load_store(work)?;
    let m = build_mask(&store);
    if m.active_count() == 0 {
        bail!("no grid cell recorded any demand");
    }
    write_mask(&m, &work.mask())?;
    let total = store.grid().n_cells();
    let text = format!(
        "Activity mask\n  active cells {:>10}\n  grid cells   {:>10}\n  fraction     {:>10.4}\n",
        m.active_count(),
        total,
        m.active_count() as f64 / total as f64
    );
    write_text(&work.path("mask_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn split(cfg: &RunConfig, work: &Work, h: Horizon) -> anyhow::Result<()> {
    let spec = cfg.split.spec();
    spec.validate()?;
    let store = load_store(work)?;
    let cands = enumerate_samples(store.len(), spec.lookback, h)?;
    let mut a = split_samples(&cands, &spec)?;
    let mut excluded = 0;
    if cfg.split.exclude_missing {
        let missing: Vec<usize> = store.frames().iter().enumerate().filter(|(_, f)| f.missing).map(|(t, _)| t).collect();
        let before = a.len();
        a = exclude_missing(&a, &missing, spec.lookback);
        excluded = before - a.len();
    }
    let leak = verify_no_leakage(&a, spec.lookback);
    let mut w = create(&work.split(h))?;
    write_assignment_csv(&a, store.start(), &mut w)?;
    w.flush()?;

    let mut text = format!("Split ({}), lookback {} h, buffer {} h\n", h.as_str(), spec.lookback, spec.buffer);
    let _ = writeln!(text, "  candidates {:>8}", cands.len());
    for (name, (s, b)) in SUBSET_NAMES.iter().zip(a.subsets().iter().zip(a.bounds())) {
        let range = b.map(|(f, l)| format!("targets {f}..={l}")).unwrap_or_default();
        let _ = writeln!(text, "  {name:<10} {:>8}  {range}", s.len());
    }
    if cfg.split.exclude_missing {
        let _ = writeln!(text, "  excluded (missing hours) {excluded}");
    }
    for (a_name, b_name, gap) in &leak.gaps {
        let _ = writeln!(text, "  gap {a_name}->{b_name}: {gap} h");
    }
    let _ = writeln!(text, "  leakage check: {}", if leak.pass { "pass" } else { "FAIL" });
    write_text(&work.path(&format!("split_{}.txt", h.as_str())), &text)?;
    print!("{text}");
    if !leak.pass {
        bail!("split violates the lookback separation");
    }
    Ok(())
}

fn load_series(work: &Work) -> anyhow::Result<MaskedSeries> {
    let store = load_store(work)?;
    let dir = work.require(work.mask(), "mask")?;
    let m = read_mask(&dir)?;
    Ok(MaskedSeries::new(&store, &m)?)
}

fn load_split(work: &Work, h: Horizon) -> anyhow::Result<SplitAssignment> {
    let r = work.open(work.split(h), &format!("split --horizon {}", h.as_str()))?;
    let a = read_assignment_csv(r)?;
    if a.subsets().iter().flat_map(|s| s.iter()).any(|s| s.horizon != h) {
        bail!("{} was written for another horizon", work.split(h).display());
    }
    Ok(a)
}

fn load_ranking(work: &Work, h: Horizon) -> anyhow::Result<LagRanking> {
    let r = work.open(work.ranking(h), &format!("rank-lags --horizon {}", h.as_str()))?;
    Ok(LagRanking::read_csv(r)?)
}

pub fn rank(cfg: &RunConfig, work: &Work, h: Horizon) -> anyhow::Result<()> {
    let max_lag = cfg.max_lag();
    if max_lag < h.min_lag() {
        return Err(config_err(format!("max lag {max_lag} is below the {} minimum of {}", h.as_str(), h.min_lag())));
    }
    if max_lag > cfg.split.lookback {
        return Err(config_err(format!("max lag {max_lag} exceeds the split lookback {}", cfg.split.lookback)));
    }
    let metrics = cfg.metrics()?;
    let series = load_series(work)?;
    let a = load_split(work, h)?;
    let m = lag_metrics(&series, &a.train, &lag_universe(h, max_lag))?;
    let ranking = rank_lags(&m, &metrics)?;
    let mut w = create(&work.ranking(h))?;
    ranking.write_csv(&mut w)?;
    w.flush()?;

    let mut text = format!("Lag ranking ({}), {} candidates over {} training targets\n", h.as_str(), m.len(), a.train.len());
    let _ = writeln!(text, "{:>5} {:>6} {:>10}", "rank", "lag", "mean rank");
    for r in ranking.by_rank().into_iter().take(20) {
        let _ = writeln!(text, "{:>5} {:>6} {:>10.2}", r.rank_final, r.metrics.tau, r.rank_avg);
    }
    write_text(&work.path(&format!("ranking_{}.txt", h.as_str())), &text)?;
    print!("{text}");
    Ok(())
}

pub fn ablate(cfg: &RunConfig, work: &Work, h: Horizon) -> anyhow::Result<()> {
    let ranking = load_ranking(work, h)?;
    let series = load_series(work)?;
    let a = load_split(work, h)?;
    let res = ablate_depth(&ranking, cfg.ablate.n_max, &cfg.predictor, &series, &a.train, &a.val, &cfg.test_config())?;
    let mut w = create(&work.ablation(h))?;
    res.write_csv(&mut w)?;
    w.flush()?;
    let text = res.verdict(&format!("Depth ablation ({}), validation subset", h.as_str()));
    write_text(&work.path(&format!("ablation_{}.txt", h.as_str())), &text)?;
    print!("{text}");
    Ok(())
}

/// Minimal non-inferior lag count recorded by `ablate`, if any.
fn ablation_depth(work: &Work, h: Horizon) -> anyhow::Result<Option<usize>> {
    let path = work.ablation(h);
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(&path)?;
    for rec in r.records() {
        let rec = rec?;
        if rec.get(7).is_some_and(|role| role.split('+').any(|x| x == "minimal-ni")) {
            return Ok(rec.get(1).and_then(|s| s.parse().ok()));
        }
    }
    Ok(None)
}

/// Lag count for named configurations, with where it came from.
fn lag_count(cfg: &RunConfig, work: &Work, h: Horizon) -> anyhow::Result<(usize, &'static str)> {
    Ok(match cfg.compare.n_lags {
        Some(0) => return Err(config_err("lag count must be at least 1")),
        Some(n) => (n, "configured"),
        None => match ablation_depth(work, h)? {
            Some(n) => (n, "minimal non-inferior depth"),
            None => (Preset::default_len(h), "default"),
        },
    })
}

fn named_lags(name: &str, h: Horizon, n: usize, work: &Work) -> anyhow::Result<Vec<usize>> {
    if name == "proposed" {
        return Ok(top_k(&load_ranking(work, h)?, n)?);
    }
    Ok(name.parse::<Preset>()?.lags(h, n))
}

pub fn compare(cfg: &RunConfig, work: &Work, h: Horizon) -> anyhow::Result<()> {
    let names = &cfg.compare.presets;
    if names.is_empty() {
        return Err(config_err("no configuration to compare"));
    }
    let mut seen = HashSet::new();
    if let Some(d) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(config_err(format!("preset `{d}` given twice")));
    }
    for n in names.iter().filter(|n| n.as_str() != "proposed") {
        n.parse::<Preset>()?;
    }
    let (n, source) = lag_count(cfg, work, h)?;
    let configs = names
        .iter()
        .map(|name| Ok((name.clone(), named_lags(name, h, n, work)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    println!("{} lags per configuration ({source})", n);
    for (name, lags) in &configs {
        println!("{name}: {{{}}}", lag_list(lags));
    }

    let series = load_series(work)?;
    let a = load_split(work, h)?;
    let tc = cfg.test_config();
    let cmp = if configs.len() == 1 {
        let (label, lags) = &configs[0];
        let nf = training_norm_factor(&series, &a.train)?;
        let model = cfg.predictor.fit(&series, &a.train, lags, nf)?;
        let e = evaluate(&model, &series, &a.test, &tc.eval)?;
        Comparison {
            configs: vec![ConfigSummary { label: label.clone(), lags: lags.clone(), mean: e.mean, per_sample_mse: e.mse() }],
            tests: Vec::new(),
        }
    } else {
        compare_configs(&configs, &cfg.predictor, &series, &a.train, &a.test, &tc)?
    };
    let stem = format!("compare_{}", h.as_str());
    let mut w = create(&work.path(&format!("{stem}_summary.csv")))?;
    cmp.write_summary_csv(&mut w)?;
    w.flush()?;
    if !cmp.tests.is_empty() {
        let mut w = create(&work.path(&format!("{stem}_tests.csv")))?;
        write_results_csv(&cmp.tests, &mut w)?;
        w.flush()?;
    }
    let text = cmp.verdict(&format!("Configuration comparison ({}), test subset", h.as_str()));
    write_text(&work.path(&format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub enum LagChoice {
    Explicit(Vec<usize>),
    Named(String),
}

pub fn evaluate_cmd(cfg: &RunConfig, work: &Work, h: Horizon, choice: LagChoice, subset: &str) -> anyhow::Result<()> {
    let (label, lags) = match choice {
        LagChoice::Explicit(l) => {
            if l.is_empty() {
                return Err(config_err("empty lag list"));
            }
            if let Some(bad) = l.iter().find(|&&x| x < h.min_lag() || x > cfg.split.lookback) {
                return Err(config_err(format!(
                    "lag {bad} outside [{}, {}] for {}",
                    h.min_lag(),
                    cfg.split.lookback,
                    h.as_str()
                )));
            }
            ("custom".to_string(), l)
        }
        LagChoice::Named(name) => {
            if name != "proposed" {
                name.parse::<Preset>()?;
            }
            let (n, _) = lag_count(cfg, work, h)?;
            let lags = named_lags(&name, h, n, work)?;
            (name, lags)
        }
    };
    let k = SUBSET_NAMES
        .iter()
        .position(|s| *s == subset)
        .ok_or_else(|| config_err(format!("unknown subset `{subset}` (train, val, test)")))?;
    let series = load_series(work)?;
    let a = load_split(work, h)?;
    let nf = training_norm_factor(&series, &a.train)?;
    let model = cfg.predictor.fit(&series, &a.train, &lags, nf)?;
    let e = evaluate(&model, &series, a.subsets()[k], &cfg.test_config().eval)?;

    let stem = format!("eval_{label}_{}_{subset}", h.as_str());
    let mut w = create(&work.path(&format!("{stem}_model.csv")))?;
    model.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&work.path(&format!("{stem}_per_sample.csv")))?;
    e.write_per_sample_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&work.path(&format!("{stem}_summary.csv")))?;
    e.write_summary_csv(&mut w)?;
    w.flush()?;
    let text = format!(
        "Evaluation of {label} ({}) on {subset}: lags {{{}}}\n  samples {}\n  MSE {:.6}  MAE {:.6}  MaxAE {:.4}  R2 {:.4}\n",
        h.as_str(),
        lag_list(&lags),
        e.per_sample.len(),
        e.mean.mse,
        e.mean.mae,
        e.mean.max_ae,
        e.mean.r2
    );
    write_text(&work.path(&format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub fn parse_day(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("{s}: {e} (expected YYYY-MM-DD)"))
}
