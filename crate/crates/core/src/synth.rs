//! Synthetic trip generator with planted daily and weekly periodicity.
//!
//! Pseudo-tracts are squares laid out on a regular grid around a center
//! point. Each (tract, hour) draws a Poisson count with rate
//!
//!   base · b_tract · profile(h mod 24) · (1 + daily·cos(2πh/24 + φ_tract))
//!        · (1 + weekly·cos(2πh/168)) · drift_tract(h) · G
//!
//! where b_tract is a log-normal tract multiplier, drift a slow log-AR(1)
//! multiplier and G an optional mean-one gamma factor for extra dispersion.
//! Each count is expanded into trip rows whose duration, distance and speed
//! satisfy the default trip filters.

use std::f64::consts::PI;
use std::io::Write;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{build_centroid_table, geolocate_trips, wgs84_to_utm, write_polygons_geojson, BoundaryMode, ProjectionSpec, TractPolygon};
use crate::ingest::{write_trips_csv, TripRecord};
use crate::raster::{rasterize_range, DstRule, FrameStore, GridSpec};

/// Hour-of-day shape with mean 1: quiet nights, a morning shoulder and an
/// afternoon/evening peak.
pub const DEFAULT_PROFILE: [f64; 24] = [
    0.35, 0.25, 0.18, 0.12, 0.10, 0.15, 0.35, 0.70, 1.00, 1.10, 1.25, 1.45, 1.60, 1.65, 1.65, 1.70, 1.75, 1.80, 1.70, 1.50, 1.25, 1.00, 0.75, 0.55,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub weeks: usize,
    /// First day; generation starts at its midnight.
    pub start: NaiveDate,
    pub tract_rows: usize,
    pub tract_cols: usize,
    /// Side of each square pseudo-tract, meters.
    pub tract_size_m: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Mean trips per hour per tract.
    pub base_rate: f64,
    /// σ of the log-normal per-tract rate multiplier.
    pub base_spread: f64,
    pub daily_amp: f64,
    pub weekly_amp: f64,
    /// Daily phases φ_tract are uniform on [0, phase_spread).
    pub phase_spread: f64,
    /// Relative hour-of-day profile, 24 entries.
    pub profile: Vec<f64>,
    /// Variance of the mean-one gamma factor; 0 gives pure Poisson counts.
    pub dispersion: f64,
    /// Stationary σ of the per-tract log drift; 0 disables drift.
    pub drift_sd: f64,
    /// e-folding time of the drift autocorrelation, hours.
    pub drift_hours: f64,
    /// Probability that a trip ends in its origin tract.
    pub dest_stay: f64,
    /// Otherwise the destination is uniform within this Chebyshev radius.
    pub dest_radius: usize,
    pub dst: DstRule,
    pub projection: ProjectionSpec,
    pub vehicle_type: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            // Long enough for a three-way split with a three-week lookback.
            weeks: 16,
            start: NaiveDate::from_ymd_opt(2019, 1, 7).expect("valid date"),
            tract_rows: 8,
            tract_cols: 8,
            tract_size_m: 1200.0,
            center_lat: 30.2672,
            center_lon: -97.7431,
            base_rate: 8.0,
            base_spread: 0.5,
            daily_amp: 0.8,
            weekly_amp: 0.5,
            phase_spread: 2.0 * PI,
            profile: DEFAULT_PROFILE.to_vec(),
            dispersion: 0.0,
            drift_sd: 0.1,
            drift_hours: 168.0,
            dest_stay: 0.6,
            dest_radius: 1,
            dst: DstRule::UnitedStates,
            projection: ProjectionSpec::default(),
            vehicle_type: "scooter".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.weeks == 0 {
            return bad("weeks must be at least 1".into());
        }
        if self.weekly_amp > 0.0 && self.weeks < 2 {
            return bad("weekly_amp > 0 needs at least 2 weeks".into());
        }
        if self.tract_rows == 0 || self.tract_cols == 0 {
            return bad("tract layout needs at least one row and column".into());
        }
        if self.tract_rows * self.tract_cols > 999_999 {
            return bad("at most 999999 pseudo-tracts".into());
        }
        for (name, v) in [("daily_amp", self.daily_amp), ("weekly_amp", self.weekly_amp)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return bad(format!("base_rate must be positive, got {}", self.base_rate));
        }
        if !(self.tract_size_m > 0.0 && self.tract_size_m.is_finite()) {
            return bad(format!("tract_size_m must be positive, got {}", self.tract_size_m));
        }
        for (name, v) in [("base_spread", self.base_spread), ("dispersion", self.dispersion), ("drift_sd", self.drift_sd), ("phase_spread", self.phase_spread)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.dest_stay) {
            return bad(format!("dest_stay must lie in [0, 1], got {}", self.dest_stay));
        }
        if self.drift_sd > 0.0 && !(self.drift_hours > 0.0) {
            return bad("drift_hours must be positive when drift is enabled".into());
        }
        if self.profile.len() != 24 || self.profile.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("profile needs 24 non-negative entries".into());
        }
        if self.profile.iter().all(|&v| v == 0.0) {
            return bad("profile is identically zero".into());
        }
        self.projection.validate()
    }

    /// 24 · 7 · weeks hourly slots per tract.
    pub fn hours(&self) -> usize {
        self.weeks * 7 * 24
    }

    pub fn last_day(&self) -> NaiveDate {
        self.start + Duration::days(self.weeks as i64 * 7 - 1)
    }

    pub fn n_tracts(&self) -> usize {
        self.tract_rows * self.tract_cols
    }

    /// Deterministic part of the rate: everything except drift and dispersion.
    pub fn harmonic_rate(&self, tract: &PseudoTract, hour: usize) -> f64 {
        let h = hour as f64;
        self.base_rate
            * tract.base
            * self.profile[hour % 24]
            * (1.0 + self.daily_amp * (2.0 * PI * h / 24.0 + tract.phase).cos())
            * (1.0 + self.weekly_amp * (2.0 * PI * h / 168.0).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTract {
    pub geoid: String,
    pub row: usize,
    pub col: usize,
    /// Center in projected coordinates.
    pub easting: f64,
    pub northing: f64,
    /// Log-normal rate multiplier with mean 1.
    pub base: f64,
    pub phase: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub tracts: Vec<PseudoTract>,
    pub polygons: Vec<TractPolygon>,
    pub boundary: TractPolygon,
    /// Sorted by start time, then device id.
    pub trips: Vec<TripRecord>,
    /// Realized counts per tract and hour, tract-major.
    pub counts: Vec<u32>,
}

impl SynthOutput {
    pub fn write_trips_csv<W: Write>(&self, w: W) -> Result<()> {
        write_trips_csv(&self.trips, &[], w)
    }

    pub fn write_tracts_geojson<W: Write>(&self, w: W) -> Result<()> {
        write_polygons_geojson(&self.polygons, "GEOID", w)
    }

    pub fn write_boundary_geojson<W: Write>(&self, w: W) -> Result<()> {
        write_polygons_geojson(std::slice::from_ref(&self.boundary), "GEOID", w)
    }

    /// Rasterizes the generated trips at tract centroids on a grid covering
    /// every trip end, over exactly the generated day range.
    pub fn frame_store(&self, cell_w: f64, cell_h: f64) -> Result<FrameStore> {
        let (table, _) = build_centroid_table(&self.polygons, &self.config.projection)?;
        let (located, _) = geolocate_trips(&self.trips, &table, None, BoundaryMode::Centroid);
        let grid = GridSpec::covering_trips(&located, cell_w, cell_h)?;
        rasterize_range(&located, &grid, self.config.start, self.config.last_day(), self.config.dst)
    }

    /// Trip starts per hour of the whole range, summed over tracts.
    pub fn hourly_totals(&self) -> Vec<u64> {
        let n = self.config.hours();
        let mut out = vec![0u64; n];
        for tract in self.counts.chunks(n) {
            for (o, &c) in out.iter_mut().zip(tract) {
                *o += u64::from(c);
            }
        }
        out
    }
}

/// 11-digit GEOID "48453" + 6-digit tract code.
fn geoid(i: usize) -> String {
    format!("48453{:06}", i + 1)
}

fn layout(cfg: &SynthConfig) -> Result<(Vec<(usize, usize, f64, f64)>, Vec<TractPolygon>, TractPolygon)> {
    let (ce, cn) = wgs84_to_utm(cfg.center_lat, cfg.center_lon, &cfg.projection)?;
    let s = cfg.tract_size_m;
    let w = s * cfg.tract_cols as f64;
    let h = s * cfg.tract_rows as f64;
    // Row 0 is the northernmost row, matching the raster orientation.
    let (x0, y0) = (ce - w / 2.0, cn + h / 2.0);
    let tm = cfg.projection.projector()?;
    let lonlat = |e: f64, n: f64| {
        let (lat, lon) = tm.inverse(e, n);
        (lon, lat)
    };
    let mut centers = Vec::with_capacity(cfg.n_tracts());
    let mut polys = Vec::with_capacity(cfg.n_tracts());
    for r in 0..cfg.tract_rows {
        for c in 0..cfg.tract_cols {
            let (e0, n1) = (x0 + c as f64 * s, y0 - r as f64 * s);
            let (e1, n0) = (e0 + s, n1 - s);
            let ring = vec![lonlat(e0, n0), lonlat(e1, n0), lonlat(e1, n1), lonlat(e0, n1), lonlat(e0, n0)];
            polys.push(TractPolygon::simple(geoid(r * cfg.tract_cols + c), vec![ring]));
            centers.push((r, c, e0 + s / 2.0, n1 - s / 2.0));
        }
    }
    let m = s / 4.0;
    let (e0, e1, n0, n1) = (x0 - m, x0 + w + m, y0 - h - m, y0 + m);
    let boundary = TractPolygon::simple("boundary", vec![vec![lonlat(e0, n0), lonlat(e1, n0), lonlat(e1, n1), lonlat(e0, n1), lonlat(e0, n0)]]);
    Ok((centers, polys, boundary))
}

struct TractRun {
    tract: PseudoTract,
    counts: Vec<u32>,
    trips: Vec<TripRecord>,
}

fn run_tract(cfg: &SynthConfig, idx: usize, center: (usize, usize, f64, f64), start: NaiveDateTime) -> Result<TractRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64 + 1);

    let z: f64 = StandardNormal.sample(&mut rng);
    let base = (cfg.base_spread * z - cfg.base_spread * cfg.base_spread / 2.0).exp();
    let phase = rng.random::<f64>() * cfg.phase_spread;
    let tract = PseudoTract { geoid: geoid(idx), row: center.0, col: center.1, easting: center.2, northing: center.3, base, phase };

    let rho = if cfg.drift_sd > 0.0 { (-1.0 / cfg.drift_hours).exp() } else { 0.0 };
    let innov = cfg.drift_sd * (1.0 - rho * rho).sqrt();
    let z0: f64 = StandardNormal.sample(&mut rng);
    let mut drift = if cfg.drift_sd > 0.0 { cfg.drift_sd * z0 } else { 0.0 };
    let gamma = if cfg.dispersion > 0.0 { Some(Gamma::new(1.0 / cfg.dispersion, cfg.dispersion).map_err(|e| Error::Config(e.to_string()))?) } else { None };

    // Destination candidates within the Chebyshev radius.
    let rr = cfg.dest_radius as isize;
    let (r0, c0) = (center.0 as isize, center.1 as isize);
    let dests: Vec<usize> = (r0 - rr..=r0 + rr)
        .flat_map(|r| (c0 - rr..=c0 + rr).map(move |c| (r, c)))
        .filter(|&(r, c)| r >= 0 && c >= 0 && r < cfg.tract_rows as isize && c < cfg.tract_cols as isize)
        .map(|(r, c)| r as usize * cfg.tract_cols + c as usize)
        .collect();

    let n = cfg.hours();
    let mut counts = vec![0u32; n];
    let mut trips = Vec::new();
    for (hour, count) in counts.iter_mut().enumerate() {
        if cfg.drift_sd > 0.0 && hour > 0 {
            let e: f64 = StandardNormal.sample(&mut rng);
            drift = rho * drift + innov * e;
        }
        let slot = start + Duration::hours(hour as i64);
        if cfg.dst.is_missing(slot.date(), slot.hour() as u8) {
            continue;
        }
        let mut lambda = cfg.harmonic_rate(&tract, hour);
        if cfg.drift_sd > 0.0 {
            lambda *= (drift - cfg.drift_sd * cfg.drift_sd / 2.0).exp();
        }
        if let Some(g) = &gamma {
            lambda *= g.sample(&mut rng);
        }
        if !(lambda > 0.0) {
            continue;
        }
        let k = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng) as u32;
        *count = k;
        for _ in 0..k {
            let begin = slot + Duration::seconds(rng.random_range(0..3600));
            // Durations are whole seconds so the CSV timestamps agree exactly.
            // A trip running into the skipped spring-forward hour ends an hour
            // later on the wall clock, as it would in reality.
            let secs = rng.random_range(120..=1800i64);
            let mut end = begin + Duration::seconds(secs);
            if cfg.dst.is_missing(end.date(), end.hour() as u8) {
                end += Duration::hours(1);
            }
            let minutes = secs as f64 / 60.0;
            let speed_draw = rng.random_range(6.0f64..18.0);
            let distance = (speed_draw * minutes / 60.0 * 1000.0).round() / 1000.0;
            let dest = if rng.random::<f64>() < cfg.dest_stay { idx } else { dests[rng.random_range(0..dests.len())] };
            trips.push(TripRecord {
                row_index: 0,
                device_id: format!("S{:06}-{:07}", idx + 1, trips.len()),
                vehicle_type: cfg.vehicle_type.clone(),
                start_time: begin,
                end_time: end,
                duration: minutes,
                distance,
                origin_geoid: tract.geoid.clone(),
                dest_geoid: geoid(dest),
                extra: Vec::new(),
                speed: distance / (minutes / 60.0),
            });
        }
    }
    Ok(TractRun { tract, counts, trips })
}

/// Generates trips, tract polygons and a boundary polygon. Output is a pure
/// function of `cfg`: every tract has its own random stream, so the result
/// does not depend on scheduling.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (centers, polygons, boundary) = layout(cfg)?;
    let start = cfg.start.and_hms_opt(0, 0, 0).expect("midnight");
    let runs = centers
        .par_iter()
        .enumerate()
        .map(|(i, &c)| run_tract(cfg, i, c, start))
        .collect::<Result<Vec<_>>>()?;

    let mut tracts = Vec::with_capacity(runs.len());
    let mut counts = Vec::with_capacity(runs.len() * cfg.hours());
    let mut trips = Vec::new();
    for r in runs {
        tracts.push(r.tract);
        counts.extend(r.counts);
        trips.extend(r.trips);
    }
    trips.par_sort_by(|a, b| a.start_time.cmp(&b.start_time).then_with(|| a.device_id.cmp(&b.device_id)));
    for (i, t) in trips.iter_mut().enumerate() {
        t.row_index = i;
    }
    Ok(SynthOutput { config: cfg.clone(), tracts, polygons, boundary, trips, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{classify, FilterConfig};

    fn small() -> SynthConfig {
        SynthConfig { weeks: 2, tract_rows: 3, tract_cols: 4, ..SynthConfig::default() }
    }

    #[test]
    fn profile_has_unit_mean() {
        assert!((DEFAULT_PROFILE.iter().sum::<f64>() / 24.0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn slot_count_and_ids() {
        let out = generate(&small()).unwrap();
        assert_eq!(out.counts.len(), 12 * 2 * 7 * 24);
        assert_eq!(out.trips.len() as u64, out.counts.iter().map(|&c| u64::from(c)).sum::<u64>());
        assert!(out.polygons.iter().all(|p| p.geoid.len() == 11 && p.geoid.starts_with("48453")));
        assert!(out.trips.windows(2).all(|w| w[0].start_time <= w[1].start_time));
    }

    #[test]
    fn trips_pass_default_filters() {
        let cfg = FilterConfig::default();
        for t in generate(&small()).unwrap().trips.iter().take(2000) {
            assert!(classify(&t.to_raw(), &cfg).is_ok(), "{t:?}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.trips, b.trips);
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn no_trips_in_missing_hour() {
        let cfg = SynthConfig { start: NaiveDate::from_ymd_opt(2019, 3, 4).unwrap(), ..small() };
        let out = generate(&cfg).unwrap();
        let missing = NaiveDate::from_ymd_opt(2019, 3, 10).unwrap();
        assert!(out.trips.iter().all(|t| !(t.start_time.date() == missing && t.start_time.hour() == 2)));
        assert!(out.trips.iter().all(|t| !(t.end_time.date() == missing && t.end_time.hour() == 2)));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { weeks: 0, ..small() },
            SynthConfig { weeks: 1, ..small() },
            SynthConfig { daily_amp: 1.5, ..small() },
            SynthConfig { base_rate: 0.0, ..small() },
            SynthConfig { profile: vec![1.0; 23], ..small() },
            SynthConfig { dispersion: -1.0, ..small() },
        ] {
            assert!(generate(&cfg).unwrap_err().is_config());
        }
        assert!(generate(&SynthConfig { weeks: 1, weekly_amp: 0.0, ..small() }).is_ok());
    }
}
