//! Paired statistical testing: normality, Wilcoxon signed-rank, Holm
//! step-down, non-inferiority, and the depth-ablation / configuration
//! comparison drivers built on them.

mod selection;
mod shapiro;
mod wilcoxon;

use std::io::Write;

pub use selection::*;
pub use shapiro::{shapiro_wilk, ShapiroResult, SHAPIRO_MAX_N};
pub use wilcoxon::{exact_null_pmf, wilcoxon_signed_rank, wilcoxon_with, Alternative, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct HolmResult {
    /// Adjusted p-values in input order.
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Holm step-down adjustment; ties in p keep input order.
pub fn holm_correct(p: &[f64], alpha: f64) -> Result<HolmResult> {
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidProbability(bad));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        adjusted[i] = running;
    }
    let reject = adjusted.iter().map(|&a| a < alpha).collect();
    Ok(HolmResult { adjusted, reject })
}

/// One paired comparison between configurations A and B on aligned
/// per-sample values (differences A − B, shifted by the margin for
/// non-inferiority).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTestResult {
    pub label_a: String,
    pub label_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// W⁺; NaN when the test could not be computed.
    pub statistic: f64,
    pub p_raw: f64,
    pub p_adj: f64,
    pub alternative: Alternative,
    pub reject: bool,
    pub n_effective: usize,
    /// Non-inferiority margin δ, absent for superiority tests.
    pub margin: Option<f64>,
    /// Shapiro–Wilk (W, p) on the differences when requested.
    pub normality: Option<(f64, f64)>,
    /// Reason the test degenerated (e.g. identical configurations).
    pub error: Option<String>,
}

impl PairedTestResult {
    pub fn name(&self) -> String {
        format!("{} vs {}", self.label_a, self.label_b)
    }

    /// Label of the configuration with lower mean, if the test rejected.
    pub fn better(&self) -> Option<&str> {
        if !self.reject {
            return None;
        }
        Some(if self.mean_a <= self.mean_b { &self.label_a } else { &self.label_b })
    }
}

fn check_paired(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: (a.len(), 1), got: (b.len(), 1) });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("paired series"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Wilcoxon on `d`, turning the all-zero case into a non-rejecting p = 1
/// entry so it can still take part in a Holm family.
fn paired_test(label_a: &str, label_b: &str, a: &[f64], b: &[f64], d: &[f64], alternative: Alternative, margin: Option<f64>, normality: bool, seed: u64) -> Result<PairedTestResult> {
    let normality = if normality { shapiro_wilk(d, seed).ok().map(|r| (r.w, r.p)) } else { None };
    let base = PairedTestResult {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        mean_a: mean(a),
        mean_b: mean(b),
        statistic: f64::NAN,
        p_raw: 1.0,
        p_adj: 1.0,
        alternative,
        reject: false,
        n_effective: 0,
        margin,
        normality,
        error: None,
    };
    match wilcoxon_signed_rank(d, alternative) {
        Ok(r) => Ok(PairedTestResult { statistic: r.statistic, p_raw: r.p, p_adj: r.p, n_effective: r.n_effective, ..base }),
        Err(Error::AllZeroDifferences) => Ok(PairedTestResult { error: Some("degenerate: identical configurations".into()), ..base }),
        Err(e) => Err(e),
    }
}

/// Applies Holm across `family`, filling `p_adj` and `reject`.
pub fn apply_holm(family: &mut [PairedTestResult], alpha: f64) -> Result<()> {
    let raw: Vec<f64> = family.iter().map(|r| r.p_raw).collect();
    let h = holm_correct(&raw, alpha)?;
    for ((r, adj), rej) in family.iter_mut().zip(h.adjusted).zip(h.reject) {
        r.p_adj = adj;
        r.reject = rej && r.error.is_none();
    }
    Ok(())
}

/// Two-sided superiority test of A against B (differences A − B).
pub fn paired_wilcoxon(label_a: &str, a: &[f64], label_b: &str, b: &[f64], alpha: f64) -> Result<PairedTestResult> {
    check_paired(a, b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut r = paired_test(label_a, label_b, a, b, &d, Alternative::TwoSided, None, false, 0)?;
    r.reject = r.error.is_none() && r.p_raw < alpha;
    Ok(r)
}

/// Non-inferiority of `cand` relative to `reference` with margin
/// δ = fraction · mean(reference): one-sided test that cand − ref − δ < 0.
/// Passes iff p < α (callers batching several tests re-adjust with Holm).
pub fn non_inferiority(cand: &[f64], reference: &[f64], margin_fraction: f64, alpha: f64) -> Result<PairedTestResult> {
    non_inferiority_labeled("candidate", cand, "reference", reference, margin_fraction, alpha)
}

pub fn non_inferiority_labeled(label_c: &str, cand: &[f64], label_r: &str, reference: &[f64], margin_fraction: f64, alpha: f64) -> Result<PairedTestResult> {
    check_paired(cand, reference)?;
    if !(margin_fraction > 0.0 && margin_fraction.is_finite()) {
        return Err(Error::Config(format!("non-inferiority margin fraction must be positive, got {margin_fraction}")));
    }
    let delta = margin_fraction * mean(reference);
    let d: Vec<f64> = cand.iter().zip(reference).map(|(c, r)| c - r - delta).collect();
    let mut r = paired_test(label_c, label_r, cand, reference, &d, Alternative::Less, Some(delta), false, 0)?;
    r.reject = r.error.is_none() && r.p_raw < alpha;
    Ok(r)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Results CSV: one row per paired test.
pub fn write_results_csv<W: Write>(results: &[PairedTestResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "pair", "config_a", "config_b", "mean_a", "mean_b", "alternative", "statistic", "p_raw", "p_adj", "decision", "better", "n_effective", "margin",
        "shapiro_w", "shapiro_p", "error",
    ])?;
    for r in results {
        out.write_record([
            r.name(),
            r.label_a.clone(),
            r.label_b.clone(),
            r.mean_a.to_string(),
            r.mean_b.to_string(),
            r.alternative.to_string(),
            r.statistic.to_string(),
            r.p_raw.to_string(),
            r.p_adj.to_string(),
            if r.reject { "reject" } else { "retain" }.to_string(),
            r.better().unwrap_or("").to_string(),
            r.n_effective.to_string(),
            fmt_opt(r.margin),
            fmt_opt(r.normality.map(|n| n.0)),
            fmt_opt(r.normality.map(|n| n.1)),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
