//! Sample enumeration and leakage-free chronological train/val/test split.

use std::io::{Read, Write};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    #[default]
    NextHour,
    Next24h,
}

impl Horizon {
    /// Smallest admissible lag: a next-24h forecast may only use frames at
    /// least a day old.
    pub fn min_lag(&self) -> usize {
        match self {
            Horizon::NextHour => 1,
            Horizon::Next24h => 24,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Horizon::NextHour => "next-hour",
            Horizon::Next24h => "next-24h",
        }
    }
}

impl std::str::FromStr for Horizon {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next-hour" => Ok(Horizon::NextHour),
            "next-24h" => Ok(Horizon::Next24h),
            _ => Err(Error::Config(format!("unknown horizon `{s}` (next-hour | next-24h)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleIndex {
    /// Absolute hour index of the target frame.
    pub target: usize,
    pub horizon: Horizon,
}

/// Fractions that reproduce the 3,743 / 1,752 / 1,753 Austin split. The
/// published percentages (51.64 / 24.17 / 24.18) miss 1 by 1e-4; the last
/// subset absorbs the remainder under cumulative rounding anyway.
pub const AUSTIN_FRACTIONS: [f64; 3] = [0.5164, 0.2417, 0.2419];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Maximum lookback L, hours.
    pub lookback: usize,
    /// Extra separation beyond L.
    pub buffer: usize,
    pub fractions: [f64; 3],
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { lookback: 504, buffer: 1, fractions: AUSTIN_FRACTIONS }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 1 {
            return Err(Error::Config("lookback must be at least 1 hour".into()));
        }
        if self.fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config(format!("negative split fraction in {:?}", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Candidate targets removed by each interior gap.
    pub fn gap_removed(&self) -> usize {
        self.lookback + self.buffer - 1
    }
}

pub const SUBSET_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub train: Vec<SampleIndex>,
    pub val: Vec<SampleIndex>,
    pub test: Vec<SampleIndex>,
}

impl SplitAssignment {
    pub fn subsets(&self) -> [&[SampleIndex]; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (first, last) target of each subset; `None` for empty subsets.
    pub fn bounds(&self) -> [Option<(usize, usize)>; 3] {
        self.subsets()
            .map(|s| Some((s.first()?.target, s.last()?.target)))
    }

    pub fn with_horizon(mut self, horizon: Horizon) -> Self {
        for s in [&mut self.train, &mut self.val, &mut self.test] {
            s.iter_mut().for_each(|x| x.horizon = horizon);
        }
        self
    }
}

/// Targets t = L … T−1.
pub fn enumerate_samples(total_hours: usize, lookback: usize, horizon: Horizon) -> Result<Vec<SampleIndex>> {
    if total_hours <= lookback {
        return Err(Error::Insufficient(format!(
            "{total_hours} hours cannot host a {lookback}-hour lookback"
        )));
    }
    Ok((lookback..total_hours).map(|target| SampleIndex { target, horizon }).collect())
}

/// Contiguous chronological blocks. Each gap between two non-empty subsets
/// drops L + buffer − 1 candidates; the remaining usable count U is shared by
/// cumulative rounding, so block k ends at round(U·Σ_{j≤k} f_j).
pub fn split_samples(candidates: &[SampleIndex], spec: &SplitSpec) -> Result<SplitAssignment> {
    spec.validate()?;
    let active: Vec<usize> = (0..3).filter(|&k| spec.fractions[k] > 0.0).collect();
    let gaps = active.len().saturating_sub(1);
    let removed = gaps * spec.gap_removed();
    if candidates.len() <= removed {
        return Err(Error::Insufficient(format!(
            "{} candidates cannot host {gaps} gaps of {} hours",
            candidates.len(),
            spec.lookback + spec.buffer
        )));
    }
    let usable = candidates.len() - removed;

    let mut sizes = [0usize; 3];
    let mut cum = 0.0;
    let mut prev_end = 0usize;
    for &k in &active {
        cum += spec.fractions[k];
        let end = if k == *active.last().unwrap() { usable } else { (usable as f64 * cum).round() as usize };
        sizes[k] = end.saturating_sub(prev_end);
        prev_end = end.max(prev_end);
        if sizes[k] == 0 {
            return Err(Error::Insufficient(format!(
                "{} subset would be empty with {usable} usable samples",
                SUBSET_NAMES[k]
            )));
        }
    }

    let mut out = SplitAssignment::default();
    let mut pos = 0;
    for (n, &k) in active.iter().enumerate() {
        if n > 0 {
            pos += spec.gap_removed();
        }
        let block = candidates[pos..pos + sizes[k]].to_vec();
        pos += sizes[k];
        match k {
            0 => out.train = block,
            1 => out.val = block,
            _ => out.test = block,
        }
    }
    Ok(out)
}

/// Split by explicit inclusive target-hour ranges.
pub fn split_by_ranges(candidates: &[SampleIndex], ranges: [(usize, usize); 3]) -> SplitAssignment {
    let pick = |(a, b): (usize, usize)| candidates.iter().copied().filter(|s| s.target >= a && s.target <= b).collect();
    SplitAssignment { train: pick(ranges[0]), val: pick(ranges[1]), test: pick(ranges[2]) }
}

/// Drop samples whose window [t − L, t] touches one of the `missing` hours.
pub fn exclude_missing(a: &SplitAssignment, missing: &[usize], lookback: usize) -> SplitAssignment {
    let keep = |s: &&SampleIndex| !missing.iter().any(|&m| m <= s.target && m + lookback >= s.target);
    let f = |v: &[SampleIndex]| v.iter().filter(keep).copied().collect();
    SplitAssignment { train: f(&a.train), val: f(&a.val), test: f(&a.test) }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageReport {
    pub pass: bool,
    /// (earlier subset, later subset, first target of later − last target of earlier).
    pub gaps: Vec<(&'static str, &'static str, i64)>,
    /// Smallest observed gap minus the required L + 1; `None` with fewer
    /// than two non-empty subsets.
    pub margin: Option<i64>,
}

/// Passes iff consecutive non-empty subsets are separated by at least L + 1
/// hours, i.e. no input window [t − L, t − 1] reaches into an earlier
/// subset's targets.
pub fn verify_no_leakage(a: &SplitAssignment, lookback: usize) -> LeakageReport {
    let bounds = a.bounds();
    let present: Vec<usize> = (0..3).filter(|&k| bounds[k].is_some()).collect();
    let mut gaps = Vec::new();
    let mut pass = true;
    if a.subsets().iter().any(|s| s.windows(2).any(|w| w[1].target <= w[0].target)) {
        pass = false;
    }
    for w in present.windows(2) {
        let (_, last) = bounds[w[0]].unwrap();
        let (first, _) = bounds[w[1]].unwrap();
        let gap = first as i64 - last as i64;
        gaps.push((SUBSET_NAMES[w[0]], SUBSET_NAMES[w[1]], gap));
    }
    let required = lookback as i64 + 1;
    let margin = gaps.iter().map(|g| g.2 - required).min();
    if margin.is_some_and(|m| m < 0) {
        pass = false;
    }
    LeakageReport { pass, gaps, margin }
}

/// CSV with columns subset, target_hour_index, target_timestamp.
pub fn write_assignment_csv<W: Write>(a: &SplitAssignment, start: NaiveDate, w: W) -> Result<()> {
    let t0 = start.and_hms_opt(0, 0, 0).expect("midnight");
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["subset", "target_hour_index", "target_timestamp", "horizon"])?;
    for (name, s) in SUBSET_NAMES.iter().zip(a.subsets()) {
        for x in s {
            let ts = t0 + Duration::hours(x.target as i64);
            out.write_record([
                name.to_string(),
                x.target.to_string(),
                ts.format("%Y-%m-%d %H:%M:%S").to_string(),
                x.horizon.as_str().to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_assignment_csv<R: Read>(r: R) -> Result<SplitAssignment> {
    let mut a = SplitAssignment::default();
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        let bad = || Error::Parse(format!("bad split row {rec:?}"));
        let target = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let horizon = match rec.get(3) {
            Some(h) => h.parse()?,
            None => Horizon::NextHour,
        };
        let s = SampleIndex { target, horizon };
        match rec.get(0) {
            Some("train") => a.train.push(s),
            Some("val") => a.val.push(s),
            Some("test") => a.test.push(s),
            _ => return Err(bad()),
        }
    }
    Ok(a)
}
