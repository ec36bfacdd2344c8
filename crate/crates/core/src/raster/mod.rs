//! Metric grid and hourly pick-up / drop-off count images.

mod io;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::LocatedTrip;

pub use io::{
    decode_png16, encode_png16, frame_file_name, read_frame, read_grid, read_image_png, read_store,
    write_frame, write_grid, write_image_png, write_store, Channel,
};

/// Uniform grid in projected meters. Row 0 is the northernmost row; cell
/// (r, c) spans [x0 + c·w, x0 + (c+1)·w) × (y0 − (r+1)·h, y0 − r·h].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Easting of the north-west corner.
    pub origin_x: f64,
    /// Northing of the north-west corner.
    pub origin_y: f64,
    pub cell_w: f64,
    pub cell_h: f64,
    pub rows: usize,
    pub cols: usize,
}

pub const DEFAULT_CELL_W: f64 = 240.0;
pub const DEFAULT_CELL_H: f64 = 220.0;

fn check_cells(cell_w: f64, cell_h: f64) -> Result<()> {
    if !(cell_w > 0.0 && cell_h > 0.0 && cell_w.is_finite() && cell_h.is_finite()) {
        return Err(Error::Config(format!("cell size {cell_w}×{cell_h} must be positive")));
    }
    Ok(())
}

impl GridSpec {
    /// Grid whose north-west corner is (min_x, max_y), expanded to whole
    /// cells: W = ⌈span_x / w⌉, H = ⌈span_y / h⌉ (at least 1).
    pub fn from_bounds(min_x: f64, min_y: f64, max_x: f64, max_y: f64, cell_w: f64, cell_h: f64) -> Result<Self> {
        check_cells(cell_w, cell_h)?;
        let (sx, sy) = (max_x - min_x, max_y - min_y);
        if !(sx >= 0.0 && sy >= 0.0) || (sx == 0.0 && sy == 0.0) {
            return Err(Error::EmptyInput("grid bounds have zero extent"));
        }
        Ok(Self {
            origin_x: min_x,
            origin_y: max_y,
            cell_w,
            cell_h,
            cols: ((sx / cell_w).ceil() as usize).max(1),
            rows: ((sy / cell_h).ceil() as usize).max(1),
        })
    }

    /// Smallest grid anchored at the points' north-west bounding corner that
    /// contains every point under the half-open cell convention.
    pub fn covering_points<I>(points: I, cell_w: f64, cell_h: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        check_cells(cell_w, cell_h)?;
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        if !(min_x.is_finite() && min_y.is_finite() && max_x.is_finite() && max_y.is_finite()) {
            return Err(Error::EmptyInput("no finite coordinates to grid"));
        }
        // Same arithmetic as `point_to_cell`, so the far edges always land
        // in the last row/column.
        Ok(Self {
            origin_x: min_x,
            origin_y: max_y,
            cell_w,
            cell_h,
            cols: ((max_x - min_x) / cell_w).floor() as usize + 1,
            rows: ((max_y - min_y) / cell_h).floor() as usize + 1,
        })
    }

    /// Grid covering both ends of every located trip.
    pub fn covering_trips(trips: &[LocatedTrip], cell_w: f64, cell_h: f64) -> Result<Self> {
        Self::covering_points(trips.iter().flat_map(|t| [t.origin, t.dest]), cell_w, cell_h)
    }

    pub fn validate(&self) -> Result<()> {
        check_cells(self.cell_w, self.cell_h)?;
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs at least one row and column".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn diagonal(&self) -> f64 {
        self.cell_w.hypot(self.cell_h)
    }

    fn col_of(&self, x: f64) -> f64 {
        ((x - self.origin_x) / self.cell_w).floor()
    }

    fn row_of(&self, y: f64) -> f64 {
        ((self.origin_y - y) / self.cell_h).floor()
    }

    /// (row, col) of a point, or `None` outside the grid.
    pub fn point_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (r, c) = (self.row_of(y), self.col_of(x));
        (r >= 0.0 && c >= 0.0 && r < self.rows as f64 && c < self.cols as f64).then_some((r as usize, c as usize))
    }

    pub fn flat_index(&self, x: f64, y: f64) -> Option<usize> {
        self.point_to_cell(x, y).map(|(r, c)| r * self.cols + c)
    }
}

/// Sparse non-negative count image: sorted (row-major index, count) pairs,
/// zero counts omitted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CountImage {
    rows: usize,
    cols: usize,
    entries: Vec<(u32, u32)>,
}

impl CountImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: Vec::new() }
    }

    pub fn from_dense(rows: usize, cols: usize, values: &[u32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                got: (values.len() / cols.max(1), cols),
            });
        }
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(i, &v)| (i as u32, v))
            .collect();
        Ok(Self { rows, cols, entries })
    }

    /// Sums repeated indices. Panics on an index outside the image.
    pub fn from_indices(rows: usize, cols: usize, mut cells: Vec<u32>) -> Self {
        cells.sort_unstable();
        let mut entries: Vec<(u32, u32)> = Vec::new();
        for i in cells {
            assert!((i as usize) < rows * cols, "cell index {i} outside {rows}×{cols}");
            match entries.last_mut() {
                Some((j, n)) if *j == i => *n += 1,
                _ => entries.push((i, 1)),
            }
        }
        Self { rows, cols, entries }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.get_flat(r * self.cols + c)
    }

    pub fn get_flat(&self, i: usize) -> u32 {
        self.entries
            .binary_search_by_key(&(i as u32), |e| e.0)
            .map_or(0, |k| self.entries[k].1)
    }

    /// Non-zero pixels as (row-major index, count), ascending.
    pub fn nonzero(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<u32> {
        let mut v = vec![0; self.rows * self.cols];
        for &(i, n) in &self.entries {
            v[i as usize] = n;
        }
        v
    }

    pub fn sum(&self) -> u64 {
        self.entries.iter().map(|e| u64::from(e.1)).sum()
    }

    pub fn max(&self) -> u32 {
        self.entries.iter().map(|e| e.1).max().unwrap_or(0)
    }

    /// Values at the given ascending row-major indices.
    pub fn gather(&self, sorted_indices: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; sorted_indices.len()];
        let mut k = 0;
        for &(i, n) in &self.entries {
            while k < sorted_indices.len() && sorted_indices[k] < i {
                k += 1;
            }
            if k == sorted_indices.len() {
                break;
            }
            if sorted_indices[k] == i {
                out[k] = f64::from(n);
            }
        }
        out
    }
}

/// One hour's pick-up and drop-off images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandFrame {
    pub date: NaiveDate,
    pub hour: u8,
    pub pickup: CountImage,
    pub dropoff: CountImage,
    /// Clock hour that does not exist in local time (spring-forward).
    pub missing: bool,
}

impl DemandFrame {
    pub fn empty(date: NaiveDate, hour: u8, rows: usize, cols: usize) -> Self {
        Self {
            date,
            hour,
            pickup: CountImage::zeros(rows, cols),
            dropoff: CountImage::zeros(rows, cols),
            missing: false,
        }
    }

    pub fn timestamp(&self) -> NaiveDateTime {
        self.date.and_hms_opt(u32::from(self.hour), 0, 0).expect("hour < 24")
    }
}

/// Daylight-saving convention used to flag nonexistent local clock hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DstRule {
    None,
    /// 02:00 on the second Sunday of March is skipped.
    #[default]
    UnitedStates,
}

impl DstRule {
    pub fn is_missing(&self, date: NaiveDate, hour: u8) -> bool {
        match self {
            DstRule::None => false,
            DstRule::UnitedStates => {
                hour == 2 && date.month() == 3 && NaiveDate::from_weekday_of_month_opt(date.year(), 3, Weekday::Sun, 2) == Some(date)
            }
        }
    }
}

/// Trips or trip ends that did not land in any frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterTally {
    pub pickup_out_of_grid: usize,
    pub dropoff_out_of_grid: usize,
    pub pickup_out_of_range: usize,
    pub dropoff_out_of_range: usize,
    /// Trip ends stamped with a nonexistent clock hour.
    pub in_missing_hour: usize,
}

/// Gap-free hourly sequence of frames starting at midnight of `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStore {
    grid: GridSpec,
    start: NaiveDate,
    frames: Vec<DemandFrame>,
    pub tally: RasterTally,
}

impl FrameStore {
    /// Checks dates, hours and shapes; the frame count must be a whole
    /// number of days.
    pub fn from_frames(grid: GridSpec, start: NaiveDate, frames: Vec<DemandFrame>) -> Result<Self> {
        grid.validate()?;
        if frames.is_empty() || !frames.len().is_multiple_of(24) {
            return Err(Error::Insufficient(format!(
                "frame store needs whole days of 24 frames, got {}",
                frames.len()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            let t = hour_timestamp(start, i);
            if f.date != t.date() || u32::from(f.hour) != t.hour() {
                return Err(Error::Parse(format!("frame {i} is stamped {} {:02}, expected {t}", f.date, f.hour)));
            }
            for img in [&f.pickup, &f.dropoff] {
                if img.shape() != grid.shape() {
                    return Err(Error::ShapeMismatch { expected: grid.shape(), got: img.shape() });
                }
            }
        }
        Ok(Self { grid, start, frames, tally: RasterTally::default() })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn days(&self) -> usize {
        self.frames.len() / 24
    }

    pub fn frame(&self, t: usize) -> &DemandFrame {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[DemandFrame] {
        &self.frames
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        hour_timestamp(self.start, t)
    }

    /// Absolute hour index of the clock hour containing `ts`.
    pub fn hour_index(&self, ts: NaiveDateTime) -> Option<usize> {
        hour_index(self.start, self.frames.len(), ts)
    }

    pub fn total_pickups(&self) -> u64 {
        self.frames.iter().map(|f| f.pickup.sum()).sum()
    }

    pub fn total_dropoffs(&self) -> u64 {
        self.frames.iter().map(|f| f.dropoff.sum()).sum()
    }

    /// Largest pixel over frames [from, to) in either channel.
    pub fn max_pixel(&self, from: usize, to: usize) -> u32 {
        self.frames[from..to]
            .iter()
            .map(|f| f.pickup.max().max(f.dropoff.max()))
            .max()
            .unwrap_or(0)
    }
}

fn hour_timestamp(start: NaiveDate, t: usize) -> NaiveDateTime {
    start.and_hms_opt(0, 0, 0).expect("midnight") + Duration::hours(t as i64)
}

fn hour_index(start: NaiveDate, len: usize, ts: NaiveDateTime) -> Option<usize> {
    let days = (ts.date() - start).num_days();
    let idx = days * 24 + i64::from(ts.hour());
    (idx >= 0 && (idx as usize) < len).then_some(idx as usize)
}

/// Frame for one (day, hour): pick-ups by start time and origin, drop-offs
/// by end time and destination. Returns the frame and the out-of-grid tally.
pub fn rasterize_hour(trips: &[LocatedTrip], g: &GridSpec, date: NaiveDate, hour: u8) -> (DemandFrame, RasterTally) {
    let in_hour = |ts: NaiveDateTime| ts.date() == date && ts.hour() == u32::from(hour);
    let mut tally = RasterTally::default();
    let (mut p, mut d) = (Vec::new(), Vec::new());
    for t in trips {
        if in_hour(t.start_time) {
            match g.flat_index(t.origin.0, t.origin.1) {
                Some(i) => p.push(i as u32),
                None => tally.pickup_out_of_grid += 1,
            }
        }
        if in_hour(t.end_time) {
            match g.flat_index(t.dest.0, t.dest.1) {
                Some(i) => d.push(i as u32),
                None => tally.dropoff_out_of_grid += 1,
            }
        }
    }
    let frame = DemandFrame {
        date,
        hour,
        pickup: CountImage::from_indices(g.rows, g.cols, p),
        dropoff: CountImage::from_indices(g.rows, g.cols, d),
        missing: false,
    };
    (frame, tally)
}

/// One frame per hour of the inclusive date range. Trip ends outside the
/// range or grid are tallied and dropped; nonexistent clock hours under
/// `dst` become all-zero frames flagged missing.
pub fn rasterize_range(
    trips: &[LocatedTrip],
    g: &GridSpec,
    first_day: NaiveDate,
    last_day: NaiveDate,
    dst: DstRule,
) -> Result<FrameStore> {
    g.validate()?;
    if last_day < first_day {
        return Err(Error::Config(format!("date range {first_day}..{last_day} is empty")));
    }
    let n = ((last_day - first_day).num_days() as usize + 1) * 24;
    let mut tally = RasterTally::default();
    let mut p_cells: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut d_cells: Vec<Vec<u32>> = vec![Vec::new(); n];

    for t in trips {
        match hour_index(first_day, n, t.start_time) {
            None => tally.pickup_out_of_range += 1,
            Some(h) => match g.flat_index(t.origin.0, t.origin.1) {
                None => tally.pickup_out_of_grid += 1,
                Some(i) => p_cells[h].push(i as u32),
            },
        }
        match hour_index(first_day, n, t.end_time) {
            None => tally.dropoff_out_of_range += 1,
            Some(h) => match g.flat_index(t.dest.0, t.dest.1) {
                None => tally.dropoff_out_of_grid += 1,
                Some(i) => d_cells[h].push(i as u32),
            },
        }
    }

    let frames: Vec<(DemandFrame, usize)> = p_cells
        .into_par_iter()
        .zip(d_cells)
        .enumerate()
        .map(|(h, (p, d))| {
            let ts = hour_timestamp(first_day, h);
            let hour = ts.hour() as u8;
            if dst.is_missing(ts.date(), hour) {
                let mut f = DemandFrame::empty(ts.date(), hour, g.rows, g.cols);
                f.missing = true;
                (f, p.len() + d.len())
            } else {
                let f = DemandFrame {
                    date: ts.date(),
                    hour,
                    pickup: CountImage::from_indices(g.rows, g.cols, p),
                    dropoff: CountImage::from_indices(g.rows, g.cols, d),
                    missing: false,
                };
                (f, 0)
            }
        })
        .collect();

    tally.in_missing_hour = frames.iter().map(|f| f.1).sum();
    let mut store = FrameStore::from_frames(*g, first_day, frames.into_iter().map(|f| f.0).collect())?;
    store.tally = tally;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec { origin_x: 1000.0, origin_y: 5000.0, cell_w: 240.0, cell_h: 220.0, rows: 3, cols: 4 }
    }

    fn at(date: NaiveDate, h: u32, m: u32) -> NaiveDateTime {
        date.and_hms_opt(h, m, 0).unwrap()
    }

    fn trip(start: NaiveDateTime, end: NaiveDateTime, o: (f64, f64), d: (f64, f64)) -> LocatedTrip {
        LocatedTrip { row_index: 0, start_time: start, end_time: end, origin: o, dest: d }
    }

    #[test]
    fn austin_shape_from_bounds() {
        let g = GridSpec::from_bounds(0.0, 0.0, 52_080.0, 53_020.0, 240.0, 220.0).unwrap();
        assert_eq!((g.rows, g.cols), (241, 217));
        assert!((g.diagonal() - 325.576).abs() < 1e-3);
        let g2 = GridSpec::from_bounds(0.0, 0.0, 52_080.0 + 239.0, 53_020.0 + 219.0, 240.0, 220.0).unwrap();
        assert!(g2.cols - g.cols <= 1 && g2.rows - g.rows <= 1);
        assert!(GridSpec::from_bounds(5.0, 5.0, 5.0, 5.0, 240.0, 220.0).is_err());
    }

    #[test]
    fn single_point_grid() {
        let g = GridSpec::covering_points([(620_903.8, 3_349_062.4)], 240.0, 220.0).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g.point_to_cell(620_903.8, 3_349_062.4), Some((0, 0)));
    }

    #[test]
    fn cell_conventions() {
        let g = grid();
        assert_eq!(g.point_to_cell(1000.0, 5000.0), Some((0, 0)));
        assert_eq!(g.point_to_cell(1240.0, 5000.0), Some((0, 1)));
        assert_eq!(g.point_to_cell(1000.0, 4780.0), Some((1, 0)));
        assert_eq!(g.point_to_cell(1000.0, 4780.1), Some((0, 0)));
        assert_eq!(g.point_to_cell(999.9, 4900.0), None);
        assert_eq!(g.point_to_cell(1000.0, 5000.1), None);
        assert_eq!(g.point_to_cell(1960.0, 4900.0), None);
        assert_eq!(g.point_to_cell(1100.0, 4340.0), None);
    }

    #[test]
    fn sparse_image_ops() {
        let img = CountImage::from_indices(3, 4, vec![5, 1, 5, 11]);
        assert_eq!(img.get(1, 1), 2);
        assert_eq!(img.get(0, 1), 1);
        assert_eq!(img.get(2, 3), 1);
        assert_eq!(img.sum(), 4);
        assert_eq!(img.max(), 2);
        assert_eq!(img.gather(&[0, 1, 5, 11]), vec![0.0, 1.0, 2.0, 1.0]);
        assert_eq!(CountImage::from_dense(3, 4, &img.to_dense()).unwrap(), img);
    }

    #[test]
    fn hour_rasterization() {
        let g = grid();
        let d = NaiveDate::from_ymd_opt(2019, 6, 3).unwrap();
        let (empty, _) = rasterize_hour(&[], &g, d, 8);
        assert_eq!(empty.pickup.sum() + empty.dropoff.sum(), 0);

        let trips = vec![
            trip(at(d, 8, 10), at(d, 8, 20), (1010.0, 4990.0), (1500.0, 4700.0)),
            trip(at(d, 8, 50), at(d, 9, 5), (1020.0, 4995.0), (1500.0, 4700.0)),
            trip(at(d, 8, 30), at(d, 8, 40), (5000.0, 4995.0), (1010.0, 4990.0)),
        ];
        let (f8, tally) = rasterize_hour(&trips, &g, d, 8);
        assert_eq!(f8.pickup.get(0, 0), 2);
        assert_eq!(f8.pickup.sum(), 2);
        assert_eq!(tally.pickup_out_of_grid, 1);
        assert_eq!(f8.dropoff.get(1, 2), 1);
        assert_eq!(f8.dropoff.get(0, 0), 1);
        let (f9, _) = rasterize_hour(&trips, &g, d, 9);
        assert_eq!(f9.pickup.sum(), 0);
        assert_eq!(f9.dropoff.get(1, 2), 1);
    }

    #[test]
    fn range_counts_and_dst() {
        let g = grid();
        let first = NaiveDate::from_ymd_opt(2019, 3, 9).unwrap();
        let last = NaiveDate::from_ymd_opt(2019, 3, 11).unwrap();
        let d10 = NaiveDate::from_ymd_opt(2019, 3, 10).unwrap();
        let trips = vec![
            trip(at(d10, 1, 0), at(d10, 1, 30), (1010.0, 4990.0), (1010.0, 4990.0)),
            trip(at(d10, 2, 15), at(d10, 3, 5), (1010.0, 4990.0), (1010.0, 4990.0)),
            trip(at(last + Duration::days(1), 0, 5), at(last + Duration::days(1), 0, 10), (1010.0, 4990.0), (1010.0, 4990.0)),
        ];
        let store = rasterize_range(&trips, &g, first, last, DstRule::UnitedStates).unwrap();
        assert_eq!(store.len(), 72);
        let missing: Vec<usize> = (0..store.len()).filter(|&t| store.frame(t).missing).collect();
        assert_eq!(missing, vec![24 + 2]);
        assert_eq!(store.tally.in_missing_hour, 1);
        assert_eq!(store.tally.pickup_out_of_range, 1);
        assert_eq!(store.total_pickups(), 1);
        assert_eq!(store.total_dropoffs(), 2);
        assert_eq!(store.frame(24 + 3).dropoff.sum(), 1);
    }

    #[test]
    fn dst_rule_dates() {
        let rule = DstRule::UnitedStates;
        assert!(rule.is_missing(NaiveDate::from_ymd_opt(2019, 3, 10).unwrap(), 2));
        assert!(rule.is_missing(NaiveDate::from_ymd_opt(2020, 3, 8).unwrap(), 2));
        assert!(!rule.is_missing(NaiveDate::from_ymd_opt(2019, 3, 10).unwrap(), 3));
        assert!(!rule.is_missing(NaiveDate::from_ymd_opt(2019, 3, 3).unwrap(), 2));
        assert!(!DstRule::None.is_missing(NaiveDate::from_ymd_opt(2019, 3, 10).unwrap(), 2));
    }

    #[test]
    fn full_year_has_8760_frames() {
        let g = grid();
        let store = rasterize_range(
            &[],
            &g,
            NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2019, 12, 31).unwrap(),
            DstRule::UnitedStates,
        )
        .unwrap();
        assert_eq!(store.len(), 8760);
        assert_eq!(store.frames().iter().filter(|f| f.missing).count(), 1);
    }
}
