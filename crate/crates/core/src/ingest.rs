//! Trip-record parsing and the multi-stage validity filter.
//!
//! Parsing never fails on bad cells: each data row becomes either a
//! [`RawTripRow`] or a [`RowError`]. Filtering never fails at all; rejected
//! rows are tallied in a [`FilterReport`] under the first criterion they
//! fail, in the fixed order mode, year, duration, distance, speed, GEOID.

use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%m/%d/%Y %I:%M:%S %p",
    "%m/%d/%Y %I:%M %p",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
];

/// Parse a naive local timestamp. No timezone conversion is applied.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationUnit {
    Minutes,
    Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    Kilometers,
    Meters,
}

/// Column-name map for the trip CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripSchema {
    pub device_id: String,
    pub vehicle_type: String,
    pub start_time: String,
    pub end_time: String,
    /// Optional: when the column is absent (or a cell is empty) the duration
    /// is derived from the timestamps.
    pub duration: Option<String>,
    pub distance: String,
    pub origin_geoid: String,
    pub dest_geoid: String,
    pub duration_unit: DurationUnit,
    pub distance_unit: DistanceUnit,
    /// Maximum allowed disagreement (minutes) between the duration column and
    /// the timestamp difference. `None` disables the check.
    pub duration_tolerance_min: Option<f64>,
}

impl Default for TripSchema {
    fn default() -> Self {
        Self {
            device_id: "device_id".into(),
            vehicle_type: "vehicle_type".into(),
            start_time: "start_time".into(),
            end_time: "end_time".into(),
            duration: Some("duration_min".into()),
            distance: "distance_km".into(),
            origin_geoid: "origin_geoid".into(),
            dest_geoid: "dest_geoid".into(),
            duration_unit: DurationUnit::Minutes,
            distance_unit: DistanceUnit::Kilometers,
            duration_tolerance_min: Some(1.0),
        }
    }
}

impl TripSchema {
    /// Column names of the City of Austin shared-micromobility export
    /// (duration in seconds, distance in meters).
    pub fn austin() -> Self {
        Self {
            device_id: "Device ID".into(),
            vehicle_type: "Vehicle Type".into(),
            start_time: "Start Time".into(),
            end_time: "End Time".into(),
            duration: Some("Trip Duration".into()),
            distance: "Trip Distance".into(),
            origin_geoid: "Census Tract Start".into(),
            dest_geoid: "Census Tract End".into(),
            duration_unit: DurationUnit::Seconds,
            distance_unit: DistanceUnit::Meters,
            // The public export coarsens its timestamps, so the column and
            // the timestamp difference routinely disagree by minutes.
            duration_tolerance_min: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTripRow {
    /// 0-based index of the data row (header excluded).
    pub row_index: usize,
    pub device_id: String,
    pub vehicle_type: String,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    /// Minutes.
    pub duration: f64,
    /// Kilometers.
    pub distance: f64,
    pub origin_geoid: String,
    pub dest_geoid: String,
    /// Unused input columns, in the order of [`ParsedTrips::extra_columns`].
    pub extra: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub row_index: usize,
    /// `malformed:<field>`.
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrips {
    pub extra_columns: Vec<String>,
    pub rows: Vec<RawTripRow>,
    pub errors: Vec<RowError>,
}

impl ParsedTrips {
    pub fn total_rows(&self) -> usize {
        self.rows.len() + self.errors.len()
    }
}

struct ColumnIndex {
    device_id: usize,
    vehicle_type: usize,
    start_time: usize,
    end_time: usize,
    duration: Option<usize>,
    distance: usize,
    origin_geoid: usize,
    dest_geoid: usize,
    extra: Vec<usize>,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, schema: &TripSchema) -> Result<(Self, Vec<String>)> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        let idx = ColumnIndex {
            device_id: need(&schema.device_id)?,
            vehicle_type: need(&schema.vehicle_type)?,
            start_time: need(&schema.start_time)?,
            end_time: need(&schema.end_time)?,
            duration: schema.duration.as_deref().and_then(find),
            distance: need(&schema.distance)?,
            origin_geoid: need(&schema.origin_geoid)?,
            dest_geoid: need(&schema.dest_geoid)?,
            extra: Vec::new(),
        };
        let used = [
            Some(idx.device_id),
            Some(idx.vehicle_type),
            Some(idx.start_time),
            Some(idx.end_time),
            idx.duration,
            Some(idx.distance),
            Some(idx.origin_geoid),
            Some(idx.dest_geoid),
        ];
        let extra: Vec<usize> = (0..headers.len()).filter(|i| !used.contains(&Some(*i))).collect();
        let names = extra.iter().map(|&i| headers[i].to_string()).collect();
        Ok((ColumnIndex { extra, ..idx }, names))
    }
}

/// Parse a delimiter-separated trip file with a header row.
///
/// A missing mandatory column is fatal; a bad cell only drops its row.
pub fn parse_trips<R: Read>(source: R, schema: &TripSchema) -> Result<ParsedTrips> {
    parse_trips_with_delimiter(source, schema, b',')
}

pub fn parse_trips_with_delimiter<R: Read>(
    source: R,
    schema: &TripSchema,
    delimiter: u8,
) -> Result<ParsedTrips> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let (cols, extra_columns) = ColumnIndex::resolve(&headers, schema)?;

    let mut out = ParsedTrips {
        extra_columns,
        ..Default::default()
    };
    for (row_index, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                out.errors.push(RowError {
                    row_index,
                    reason: "malformed:record".into(),
                });
                continue;
            }
        };
        match parse_row(row_index, &record, &cols, schema) {
            Ok(row) => out.rows.push(row),
            Err(field) => out.errors.push(RowError {
                row_index,
                reason: format!("malformed:{field}"),
            }),
        }
    }
    Ok(out)
}

fn parse_row(
    row_index: usize,
    record: &csv::StringRecord,
    cols: &ColumnIndex,
    schema: &TripSchema,
) -> std::result::Result<RawTripRow, &'static str> {
    let cell = |i: usize, field: &'static str| record.get(i).map(str::trim).ok_or(field);
    let number = |i: usize, field: &'static str| -> std::result::Result<f64, &'static str> {
        cell(i, field)?
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or(field)
    };

    let start_time = parse_timestamp(cell(cols.start_time, "start_time")?).ok_or("start_time")?;
    let end_time = parse_timestamp(cell(cols.end_time, "end_time")?).ok_or("end_time")?;
    let derived = (end_time - start_time).num_milliseconds() as f64 / 60_000.0;

    let duration = match cols.duration {
        Some(i) if !cell(i, "duration")?.is_empty() => {
            let raw = number(i, "duration")?;
            let minutes = match schema.duration_unit {
                DurationUnit::Minutes => raw,
                DurationUnit::Seconds => raw / 60.0,
            };
            if let Some(tol) = schema.duration_tolerance_min {
                if (minutes - derived).abs() > tol {
                    return Err("duration");
                }
            }
            minutes
        }
        _ => derived,
    };

    let distance = match schema.distance_unit {
        DistanceUnit::Kilometers => number(cols.distance, "distance")?,
        DistanceUnit::Meters => number(cols.distance, "distance")? / 1000.0,
    };

    Ok(RawTripRow {
        row_index,
        device_id: cell(cols.device_id, "device_id")?.to_string(),
        vehicle_type: cell(cols.vehicle_type, "vehicle_type")?.to_string(),
        start_time,
        end_time,
        duration,
        distance,
        origin_geoid: cell(cols.origin_geoid, "origin_geoid")?.to_string(),
        dest_geoid: cell(cols.dest_geoid, "dest_geoid")?.to_string(),
        extra: cols
            .extra
            .iter()
            .map(|&i| record.get(i).unwrap_or("").to_string())
            .collect(),
    })
}

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub mode: String,
    pub year: i32,
    /// Minutes.
    pub duration_bounds: Bounds,
    /// Kilometers.
    pub distance_bounds: Bounds,
    /// Kilometers per hour.
    pub speed_bounds: Bounds,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: "scooter".into(),
            year: 2019,
            duration_bounds: Bounds::new(1.0, 120.0),
            distance_bounds: Bounds::new(0.1, 35.0),
            speed_bounds: Bounds::new(2.0, 26.0),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("duration", self.duration_bounds),
            ("distance", self.distance_bounds),
            ("speed", self.speed_bounds),
        ] {
            if !(b.min < b.max) {
                return Err(Error::Config(format!(
                    "{name} bounds must satisfy min < max, got [{}, {}]",
                    b.min, b.max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Mode,
    Year,
    Duration,
    Distance,
    Speed,
    Malformed,
    UnresolvedGeoid,
    OutsideBoundary,
}

impl RejectReason {
    pub const ALL: [RejectReason; 8] = [
        RejectReason::Mode,
        RejectReason::Year,
        RejectReason::Duration,
        RejectReason::Distance,
        RejectReason::Speed,
        RejectReason::Malformed,
        RejectReason::UnresolvedGeoid,
        RejectReason::OutsideBoundary,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::Mode => "mode",
            RejectReason::Year => "year",
            RejectReason::Duration => "duration",
            RejectReason::Distance => "distance",
            RejectReason::Speed => "speed",
            RejectReason::Malformed => "malformed",
            RejectReason::UnresolvedGeoid => "unresolved_geoid",
            RejectReason::OutsideBoundary => "outside_boundary",
        }
    }

    fn slot(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A trip that passed every attribute filter.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub row_index: usize,
    pub device_id: String,
    pub vehicle_type: String,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub duration: f64,
    pub distance: f64,
    pub origin_geoid: String,
    pub dest_geoid: String,
    pub extra: Vec<String>,
    /// km/h.
    pub speed: f64,
}

impl TripRecord {
    /// Drop the derived speed, e.g. to re-run the filter on kept records.
    pub fn to_raw(&self) -> RawTripRow {
        RawTripRow {
            row_index: self.row_index,
            device_id: self.device_id.clone(),
            vehicle_type: self.vehicle_type.clone(),
            start_time: self.start_time,
            end_time: self.end_time,
            duration: self.duration,
            distance: self.distance,
            origin_geoid: self.origin_geoid.clone(),
            dest_geoid: self.dest_geoid.clone(),
            extra: self.extra.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripSummary {
    pub count: usize,
    pub mean_duration: f64,
    pub median_duration: f64,
    pub mean_distance: f64,
    pub median_distance: f64,
    pub mean_speed: f64,
    pub median_speed: f64,
}

/// Rejection tallies. `kept + Σ rejected == input_rows` at all times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterReport {
    /// Every data row seen, including rows that failed to parse.
    pub input_rows: usize,
    /// Rows that failed to parse; they are also counted under `malformed`.
    pub parse_errors: usize,
    rejected: [usize; 8],
    pub kept: usize,
    pub summary: Option<TripSummary>,
}

impl FilterReport {
    pub fn rejected(&self, reason: RejectReason) -> usize {
        self.rejected[reason.slot()]
    }

    pub fn total_rejected(&self) -> usize {
        self.rejected.iter().sum()
    }

    /// Kept over all input rows, malformed ones included.
    pub fn retention_ratio(&self) -> f64 {
        ratio(self.kept, self.input_rows)
    }

    /// Kept over rows that parsed cleanly.
    pub fn retention_ratio_parsed(&self) -> f64 {
        ratio(self.kept, self.input_rows - self.parse_errors)
    }

    /// Count unparsable rows as `malformed` rejections.
    pub fn record_parse_errors(&mut self, n: usize) {
        self.input_rows += n;
        self.parse_errors += n;
        self.rejected[RejectReason::Malformed.slot()] += n;
    }

    /// Move `n` previously kept rows into the `reason` bucket.
    pub fn reject_kept(&mut self, reason: RejectReason, n: usize) {
        assert!(n <= self.kept, "cannot reject more rows than were kept");
        self.kept -= n;
        self.rejected[reason.slot()] += n;
    }

    /// Associative merge of partition reports. The summary is dropped and
    /// must be recomputed from the merged records.
    pub fn merge(&self, other: &FilterReport) -> FilterReport {
        let mut rejected = self.rejected;
        for (a, b) in rejected.iter_mut().zip(other.rejected) {
            *a += b;
        }
        FilterReport {
            input_rows: self.input_rows + other.input_rows,
            parse_errors: self.parse_errors + other.parse_errors,
            rejected,
            kept: self.kept + other.kept,
            summary: None,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["item", "value"])?;
        out.write_record(["input_rows", &self.input_rows.to_string()])?;
        out.write_record(["parse_errors", &self.parse_errors.to_string()])?;
        for reason in RejectReason::ALL {
            out.write_record([
                format!("rejected_{reason}"),
                self.rejected(reason).to_string(),
            ])?;
        }
        out.write_record(["kept", &self.kept.to_string()])?;
        out.write_record(["retention_ratio", &format!("{:.6}", self.retention_ratio())])?;
        out.write_record([
            "retention_ratio_parsed",
            &format!("{:.6}", self.retention_ratio_parsed()),
        ])?;
        if let Some(s) = &self.summary {
            for (k, v) in summary_items(s) {
                out.write_record([k, &format!("{v:.6}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn summary_items(s: &TripSummary) -> [(&'static str, f64); 6] {
    [
        ("mean_duration_min", s.mean_duration),
        ("median_duration_min", s.median_duration),
        ("mean_distance_km", s.mean_distance),
        ("median_distance_km", s.median_distance),
        ("mean_speed_kmh", s.mean_speed),
        ("median_speed_kmh", s.median_speed),
    ]
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Trip filtering report")?;
        writeln!(f, "  input rows            {:>12}", self.input_rows)?;
        for reason in RejectReason::ALL {
            writeln!(f, "  rejected {:<18} {:>8}", reason.as_str(), self.rejected(reason))?;
        }
        writeln!(f, "  kept                  {:>12}", self.kept)?;
        writeln!(
            f,
            "  retention             {:>11.2}% of all rows, {:.2}% of parsed rows",
            100.0 * self.retention_ratio(),
            100.0 * self.retention_ratio_parsed()
        )?;
        if let Some(s) = &self.summary {
            writeln!(f, "  trip statistics (mean / median)")?;
            writeln!(f, "    duration  {:>8.2} / {:>8.2} min", s.mean_duration, s.median_duration)?;
            writeln!(f, "    distance  {:>8.2} / {:>8.2} km", s.mean_distance, s.median_distance)?;
            writeln!(f, "    speed     {:>8.2} / {:>8.2} km/h", s.mean_speed, s.median_speed)?;
        }
        Ok(())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn is_well_formed_geoid(g: &str) -> bool {
    !g.is_empty() && g.bytes().all(|b| b.is_ascii_digit())
}

/// First failing criterion, or the derived speed when the row passes.
pub fn classify(row: &RawTripRow, cfg: &FilterConfig) -> std::result::Result<f64, RejectReason> {
    if !row.vehicle_type.trim().eq_ignore_ascii_case(&cfg.mode) {
        return Err(RejectReason::Mode);
    }
    if row.start_time.year() != cfg.year {
        return Err(RejectReason::Year);
    }
    if row.end_time < row.start_time || !cfg.duration_bounds.contains(row.duration) {
        return Err(RejectReason::Duration);
    }
    if !cfg.distance_bounds.contains(row.distance) {
        return Err(RejectReason::Distance);
    }
    let speed = row.distance / (row.duration / 60.0);
    if !cfg.speed_bounds.contains(speed) {
        return Err(RejectReason::Speed);
    }
    if !is_well_formed_geoid(&row.origin_geoid) || !is_well_formed_geoid(&row.dest_geoid) {
        return Err(RejectReason::Malformed);
    }
    Ok(speed)
}

pub fn filter_trips(rows: &[RawTripRow], cfg: &FilterConfig) -> (Vec<TripRecord>, FilterReport) {
    let mut kept = Vec::new();
    let mut report = FilterReport {
        input_rows: rows.len(),
        ..Default::default()
    };
    for row in rows {
        match classify(row, cfg) {
            Ok(speed) => kept.push(TripRecord {
                row_index: row.row_index,
                device_id: row.device_id.clone(),
                vehicle_type: row.vehicle_type.clone(),
                start_time: row.start_time,
                end_time: row.end_time,
                duration: row.duration,
                distance: row.distance,
                origin_geoid: row.origin_geoid.clone(),
                dest_geoid: row.dest_geoid.clone(),
                extra: row.extra.clone(),
                speed,
            }),
            Err(reason) => report.rejected[reason.slot()] += 1,
        }
    }
    report.kept = kept.len();
    report.summary = trip_summary(&kept).ok();
    (kept, report)
}

/// Same result as [`filter_trips`], computed over partitions in parallel.
pub fn filter_trips_parallel(
    rows: &[RawTripRow],
    cfg: &FilterConfig,
    chunk_size: usize,
) -> (Vec<TripRecord>, FilterReport) {
    let parts: Vec<(Vec<TripRecord>, FilterReport)> = rows
        .par_chunks(chunk_size.max(1))
        .map(|chunk| filter_trips(chunk, cfg))
        .collect();
    let mut kept = Vec::with_capacity(rows.len());
    let mut report = FilterReport::default();
    for (k, r) in parts {
        kept.extend(k);
        report = report.merge(&r);
    }
    report.summary = trip_summary(&kept).ok();
    (kept, report)
}

pub fn trip_summary(records: &[TripRecord]) -> Result<TripSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("trip summary needs at least one record"));
    }
    let stat = |f: fn(&TripRecord) -> f64| {
        let v: Vec<f64> = records.iter().map(f).collect();
        (mean(&v), median(v))
    };
    let (mean_duration, median_duration) = stat(|r| r.duration);
    let (mean_distance, median_distance) = stat(|r| r.distance);
    let (mean_speed, median_speed) = stat(|r| r.speed);
    Ok(TripSummary {
        count: records.len(),
        mean_duration,
        median_duration,
        mean_distance,
        median_distance,
        mean_speed,
        median_speed,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Kept trips as CSV: the standard columns, then pass-through columns, then speed.
pub fn write_trips_csv<W: Write>(records: &[TripRecord], extra_columns: &[String], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = TripSchema::default_columns().iter().map(|s| s.to_string()).collect();
    header.extend(extra_columns.iter().cloned());
    header.push("speed_kmh".into());
    out.write_record(&header)?;
    for r in records {
        let mut rec = vec![
            r.device_id.clone(),
            r.vehicle_type.clone(),
            format_timestamp(&r.start_time),
            format_timestamp(&r.end_time),
            format!("{}", r.duration),
            format!("{}", r.distance),
            r.origin_geoid.clone(),
            r.dest_geoid.clone(),
        ];
        rec.extend(r.extra.iter().cloned());
        rec.push(format!("{}", r.speed));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

impl TripSchema {
    fn default_columns() -> [&'static str; 8] {
        [
            "device_id",
            "vehicle_type",
            "start_time",
            "end_time",
            "duration_min",
            "distance_km",
            "origin_geoid",
            "dest_geoid",
        ]
    }
}
