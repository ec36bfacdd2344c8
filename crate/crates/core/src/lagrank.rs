//! Per-lag correlation / error scores and weight-free rank aggregation.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{ActivityMask, MaskedSeries};
use crate::raster::CountImage;
use crate::split::{Horizon, SampleIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LagMetric {
    /// Same-channel Pearson correlation, higher is better.
    #[serde(rename = "C_s")]
    SelfCorr,
    /// Cross-channel Pearson correlation, higher is better.
    #[serde(rename = "C_c")]
    CrossCorr,
    /// Same-channel masked MAE, lower is better.
    #[serde(rename = "MAE_s")]
    SelfMae,
    /// Same-channel absolute difference sum, lower is better.
    #[serde(rename = "AD_s")]
    SelfAd,
}

impl LagMetric {
    pub const ALL: [LagMetric; 4] = [LagMetric::SelfCorr, LagMetric::CrossCorr, LagMetric::SelfMae, LagMetric::SelfAd];
    pub const DEFAULT: [LagMetric; 3] = [LagMetric::SelfCorr, LagMetric::CrossCorr, LagMetric::SelfMae];

    pub fn name(&self) -> &'static str {
        match self {
            LagMetric::SelfCorr => "C_s",
            LagMetric::CrossCorr => "C_c",
            LagMetric::SelfMae => "MAE_s",
            LagMetric::SelfAd => "AD_s",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, LagMetric::SelfCorr | LagMetric::CrossCorr)
    }
}

impl std::str::FromStr for LagMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LagMetric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown lag metric `{s}` (C_s, C_c, MAE_s, AD_s)")))
    }
}

/// Sample Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: (a.len(), 1), got: (b.len(), 1) });
    }
    if a.len() < 2 {
        return Err(Error::Insufficient(format!("correlation needs |Ω| ≥ 2, got {}", a.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(centered_corr(sab, saa.sqrt(), sbb.sqrt()))
}

fn centered_corr(dot: f64, na: f64, nb: f64) -> Option<f64> {
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pearson correlation of two count images restricted to Ω.
pub fn pearson_masked(a: &CountImage, b: &CountImage, m: &ActivityMask) -> Result<Option<f64>> {
    pearson(&m.gather(a)?, &m.gather(b)?)
}

/// Scores of one lag averaged over target instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagMetrics {
    pub tau: usize,
    pub c_s: f64,
    pub c_c: f64,
    pub mae_s: f64,
    /// Population variance of the per-instance MAE_s.
    pub mae_var: f64,
    pub ad_s: f64,
    /// Target instances scored (all contribute to MAE_s / AD_s).
    pub n_valid: usize,
    /// Instances with a defined C_s / C_c (pairwise deletion).
    pub n_valid_cs: usize,
    pub n_valid_cc: usize,
}

impl LagMetrics {
    pub fn score(&self, m: LagMetric) -> f64 {
        match m {
            LagMetric::SelfCorr => self.c_s,
            LagMetric::CrossCorr => self.c_c,
            LagMetric::SelfMae => self.mae_s,
            LagMetric::SelfAd => self.ad_s,
        }
    }
}

/// Per-frame centered vectors and their norms, shared by every lag.
struct Centered {
    n: usize,
    p: Vec<f64>,
    d: Vec<f64>,
    p_norm: Vec<f64>,
    d_norm: Vec<f64>,
}

impl Centered {
    fn new(series: &MaskedSeries, frames: &[usize]) -> Self {
        let n = series.support();
        let len = series.len();
        let mut p = vec![0.0; n * len];
        let mut d = vec![0.0; n * len];
        let mut p_norm = vec![f64::NAN; len];
        let mut d_norm = vec![f64::NAN; len];
        let center = |src: &[f64], dst: &mut [f64]| -> f64 {
            let mean = src.iter().sum::<f64>() / n as f64;
            let mut ss = 0.0;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = v - mean;
                ss += *o * *o;
            }
            ss.sqrt()
        };
        for &t in frames {
            p_norm[t] = center(series.pickup(t), &mut p[t * n..(t + 1) * n]);
            d_norm[t] = center(series.dropoff(t), &mut d[t * n..(t + 1) * n]);
        }
        Self { n, p, d, p_norm, d_norm }
    }

    fn corr(&self, a: &[f64], na: f64, b: &[f64], nb: f64) -> Option<f64> {
        centered_corr(a.iter().zip(b).map(|(x, y)| x * y).sum(), na, nb)
    }

    fn p(&self, t: usize) -> &[f64] {
        &self.p[t * self.n..(t + 1) * self.n]
    }

    fn d(&self, t: usize) -> &[f64] {
        &self.d[t * self.n..(t + 1) * self.n]
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Scores for every τ in `taus` over the given targets.
pub fn lag_metrics(series: &MaskedSeries, targets: &[SampleIndex], taus: &[usize]) -> Result<Vec<LagMetrics>> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("no target instances for lag scoring"));
    }
    let n = series.support();
    if n < 2 {
        return Err(Error::Insufficient(format!("lag scoring needs |Ω| ≥ 2, got {n}")));
    }
    let t_min = targets.iter().map(|s| s.target).min().unwrap();
    let t_max = targets.iter().map(|s| s.target).max().unwrap();
    if t_max >= series.len() {
        return Err(Error::Insufficient(format!("target {t_max} beyond the {} stored frames", series.len())));
    }
    if let Some(&tau) = taus.iter().find(|&&tau| tau > t_min || tau == 0) {
        return Err(Error::LagOutOfRange { lag: tau, target: t_min });
    }

    // Frames touched by any (t, t − τ) pair.
    let mut used = vec![false; series.len()];
    for s in targets {
        used[s.target] = true;
        for &tau in taus {
            used[s.target - tau] = true;
        }
    }
    let frames: Vec<usize> = (0..series.len()).filter(|&t| used[t]).collect();
    let cen = Centered::new(series, &frames);
    let denom = 2.0 * n as f64;

    Ok(taus
        .par_iter()
        .map(|&tau| {
            let (mut cs_sum, mut cc_sum) = (0.0, 0.0);
            let (mut n_cs, mut n_cc) = (0, 0);
            let mut maes = Vec::with_capacity(targets.len());
            for s in targets {
                let (t, h) = (s.target, s.target - tau);
                let cp = cen.corr(cen.p(t), cen.p_norm[t], cen.p(h), cen.p_norm[h]);
                let cd = cen.corr(cen.d(t), cen.d_norm[t], cen.d(h), cen.d_norm[h]);
                if let (Some(a), Some(b)) = (cp, cd) {
                    cs_sum += 0.5 * (a + b);
                    n_cs += 1;
                }
                let xp = cen.corr(cen.p(t), cen.p_norm[t], cen.d(h), cen.d_norm[h]);
                let xd = cen.corr(cen.d(t), cen.d_norm[t], cen.p(h), cen.p_norm[h]);
                if let (Some(a), Some(b)) = (xp, xd) {
                    cc_sum += 0.5 * (a + b);
                    n_cc += 1;
                }
                let ad = l1(series.pickup(t), series.pickup(h)) + l1(series.dropoff(t), series.dropoff(h));
                maes.push(ad / denom);
            }
            let k = maes.len() as f64;
            let mae = maes.iter().sum::<f64>() / k;
            let mae_var = maes.iter().map(|m| (m - mae).powi(2)).sum::<f64>() / k;
            let mean_or_nan = |sum: f64, c: usize| if c > 0 { sum / c as f64 } else { f64::NAN };
            LagMetrics {
                tau,
                c_s: mean_or_nan(cs_sum, n_cs),
                c_c: mean_or_nan(cc_sum, n_cc),
                mae_s: mae,
                mae_var,
                ad_s: mae * denom,
                n_valid: maes.len(),
                n_valid_cs: n_cs,
                n_valid_cc: n_cc,
            }
        })
        .collect())
}

/// Candidate lags for a horizon: min_lag(horizon) ..= max_lag.
pub fn lag_universe(horizon: Horizon, max_lag: usize) -> Vec<usize> {
    (horizon.min_lag()..=max_lag).collect()
}

/// Average ranks (1 = best) of `scores`; NaN scores tie for last.
pub fn average_ranks(scores: &[f64], higher_is_better: bool) -> Vec<f64> {
    let key = |i: usize| if higher_is_better { -scores[i] } else { scores[i] };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| match (key(*a).is_nan(), key(*b).is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => key(*a).partial_cmp(&key(*b)).unwrap(),
    };
    order.sort_by(cmp);
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && cmp(&order[i], &order[j + 1]) == Ordering::Equal {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub metrics: LagMetrics,
    /// rank_m(τ) for each metric of the ranking, same order.
    pub ranks: Vec<f64>,
    pub rank_avg: f64,
    pub rank_final: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagRanking {
    pub used: Vec<LagMetric>,
    /// One row per lag, in input order.
    pub rows: Vec<RankRow>,
}

/// Per-metric average ranks, their mean, and the final integer order with
/// ties broken by lower MAE_s variance, then smaller τ.
pub fn rank_lags(metrics: &[LagMetrics], used: &[LagMetric]) -> Result<LagRanking> {
    if metrics.len() < 2 {
        return Err(Error::Insufficient(format!("ranking needs at least 2 lags, got {}", metrics.len())));
    }
    if used.is_empty() {
        return Err(Error::Config("ranking needs at least one metric".into()));
    }
    let per_metric: Vec<Vec<f64>> = used
        .iter()
        .map(|m| {
            let scores: Vec<f64> = metrics.iter().map(|x| x.score(*m)).collect();
            average_ranks(&scores, m.higher_is_better())
        })
        .collect();
    let mut rows: Vec<RankRow> = metrics
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let ranks: Vec<f64> = per_metric.iter().map(|r| r[i]).collect();
            RankRow {
                metrics: m.clone(),
                rank_avg: ranks.iter().sum::<f64>() / ranks.len() as f64,
                ranks,
                rank_final: 0,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let var_key = |r: &RankRow| if r.metrics.mae_var.is_nan() { f64::INFINITY } else { r.metrics.mae_var };
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        ra.rank_avg
            .total_cmp(&rb.rank_avg)
            .then(var_key(ra).total_cmp(&var_key(rb)))
            .then(ra.metrics.tau.cmp(&rb.metrics.tau))
    });
    for (pos, &i) in order.iter().enumerate() {
        rows[i].rank_final = pos + 1;
    }
    Ok(LagRanking { used: used.to_vec(), rows })
}

impl LagRanking {
    /// Rows sorted by final rank.
    pub fn by_rank(&self) -> Vec<&RankRow> {
        let mut v: Vec<&RankRow> = self.rows.iter().collect();
        v.sort_by_key(|r| r.rank_final);
        v
    }

    pub fn rank_of(&self, tau: usize) -> Option<usize> {
        self.rows.iter().find(|r| r.metrics.tau == tau).map(|r| r.rank_final)
    }

    /// Lags ordered best first.
    pub fn ordered_lags(&self) -> Vec<usize> {
        self.by_rank().iter().map(|r| r.metrics.tau).collect()
    }

    /// CSV: tau, scores, per-metric ranks of the used metrics, Rank_Avg,
    /// Rank_final and validity counts.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["tau".to_string()];
        header.extend(LagMetric::ALL.iter().map(|m| m.name().to_string()));
        header.push("MAE_s_var".into());
        header.extend(self.used.iter().map(|m| format!("rank_{}", m.name())));
        header.extend(["rank_avg", "rank_final", "n_valid", "n_valid_cs", "n_valid_cc"].map(String::from));
        out.write_record(&header)?;
        for r in &self.rows {
            let m = &r.metrics;
            let mut rec = vec![m.tau.to_string()];
            rec.extend(LagMetric::ALL.iter().map(|k| format!("{:.12e}", m.score(*k))));
            rec.push(format!("{:.12e}", m.mae_var));
            rec.extend(r.ranks.iter().map(|x| x.to_string()));
            rec.push(r.rank_avg.to_string());
            rec.push(r.rank_final.to_string());
            rec.extend([m.n_valid, m.n_valid_cs, m.n_valid_cc].map(|x| x.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Inverse of [`LagRanking::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let used: Vec<LagMetric> = header
            .iter()
            .filter_map(|h| h.strip_prefix("rank_"))
            .filter(|h| *h != "avg" && *h != "final")
            .map(str::parse)
            .collect::<Result<_>>()?;
        let idx = (
            col("tau")?,
            [col("C_s")?, col("C_c")?, col("MAE_s")?, col("AD_s")?],
            col("MAE_s_var")?,
            used.iter().map(|m| col(&format!("rank_{}", m.name()))).collect::<Result<Vec<_>>>()?,
            col("rank_avg")?,
            col("rank_final")?,
            [col("n_valid")?, col("n_valid_cs")?, col("n_valid_cc")?],
        );
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad number in ranking row {rec:?}")))
            };
            let score = |m: usize| num(idx.1[m]);
            let metrics = LagMetrics {
                tau: num(idx.0)? as usize,
                c_s: score(0)?,
                c_c: score(1)?,
                mae_s: score(2)?,
                ad_s: score(3)?,
                mae_var: num(idx.2)?,
                n_valid: num(idx.6[0])? as usize,
                n_valid_cs: num(idx.6[1])? as usize,
                n_valid_cc: num(idx.6[2])? as usize,
            };
            rows.push(RankRow {
                metrics,
                ranks: idx.3.iter().map(|&i| num(i)).collect::<Result<_>>()?,
                rank_avg: num(idx.4)?,
                rank_final: num(idx.5)? as usize,
            });
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("ranking file has no rows"));
        }
        Ok(Self { used, rows })
    }
}

/// The k best lags, returned in ascending τ order.
pub fn top_k(ranking: &LagRanking, k: usize) -> Result<Vec<usize>> {
    if k > ranking.rows.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} ranked lags", ranking.rows.len())));
    }
    let mut lags: Vec<usize> = ranking.ordered_lags().into_iter().take(k).collect();
    lags.sort_unstable();
    Ok(lags)
}

/// Hand-designed baseline lag sets to compare a ranking-derived set against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// A block of consecutive hours ending at the horizon's first admissible lag.
    RecentAdjacent,
    /// One lag per day at a fixed hour offset.
    FixedPeriod,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::RecentAdjacent, Preset::FixedPeriod];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::RecentAdjacent => "recent-adjacent",
            Preset::FixedPeriod => "fixed-period",
        }
    }

    /// Default lag count per horizon (18 for next-hour, 9 for next-24h).
    pub fn default_len(horizon: Horizon) -> usize {
        match horizon {
            Horizon::NextHour => 18,
            Horizon::Next24h => 9,
        }
    }

    /// `n` lags in ascending order. Next-hour fixed-period is t−1 plus the
    /// same hour on the preceding days (1, 25, 49, ...); next-24h is the pure
    /// daily series (24, 48, ...).
    pub fn lags(&self, horizon: Horizon, n: usize) -> Vec<usize> {
        let first = horizon.min_lag();
        match self {
            Preset::RecentAdjacent => (first..first + n).collect(),
            Preset::FixedPeriod => match horizon {
                Horizon::NextHour => (0..n).map(|d| 1 + 24 * d).collect(),
                Horizon::Next24h => (1..=n).map(|d| 24 * d).collect(),
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (recent-adjacent, fixed-period, proposed)")))
    }
}
