//! Wilcoxon signed-rank test on paired differences.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// Differences tend to be negative.
    Less,
    /// Differences tend to be positive.
    Greater,
}

impl Alternative {
    pub fn as_str(&self) -> &'static str {
        match self {
            Alternative::TwoSided => "two-sided",
            Alternative::Less => "less",
            Alternative::Greater => "greater",
        }
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Alternative {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sided" => Ok(Alternative::TwoSided),
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            _ => Err(Error::Config(format!("unknown alternative {s:?} (two-sided | less | greater)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WilcoxonMethod {
    /// Exact when n_effective ≤ 25 and there are no tied |d|, normal otherwise.
    #[default]
    Auto,
    /// Exact null distribution regardless of n; errors on ties.
    Exact,
    /// Normal approximation with tie correction and continuity correction.
    Normal,
}

/// Largest n_effective handled exactly under [`WilcoxonMethod::Auto`].
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// W⁺, the sum of ranks of positive differences.
    pub statistic: f64,
    pub p: f64,
    pub n_effective: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `v`, plus Σ(t³ − t) over tie groups.
fn ranks_with_ties(v: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        tie_sum += t * t * t - t;
        i = j;
    }
    (ranks, tie_sum)
}

/// Null pmf of W⁺ for n untied ranks: P(W⁺ = w), w = 0..=n(n+1)/2.
/// Built by adding one rank at a time; every entry is a dyadic rational so
/// the values are exact in f64 for any n this is practically used with.
pub fn exact_null_pmf(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut pmf = vec![0.0; max + 1];
    pmf[0] = 1.0;
    let mut top = 0;
    for k in 1..=n {
        top += k;
        for w in (0..=top).rev() {
            let with = if w >= k { pmf[w - k] } else { 0.0 };
            pmf[w] = 0.5 * (pmf[w] + with);
        }
    }
    pmf
}

pub fn wilcoxon_signed_rank(d: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    wilcoxon_with(d, alternative, WilcoxonMethod::Auto)
}

pub fn wilcoxon_with(d: &[f64], alternative: Alternative, method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Insufficient("Wilcoxon input contains non-finite differences".into()));
    }
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let (ranks, tie_sum) = ranks_with_ties(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).fold(0.0, |acc, (_, r)| acc + r);
    let ties = tie_sum > 0.0;

    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_MAX_N && !ties,
        WilcoxonMethod::Exact => {
            if ties {
                return Err(Error::Insufficient("exact Wilcoxon distribution requires untied |d|".into()));
            }
            true
        }
        WilcoxonMethod::Normal => false,
    };

    let p = if exact {
        let pmf = exact_null_pmf(n);
        let w = w_plus.round() as usize;
        let less: f64 = pmf[..=w].iter().sum();
        let greater: f64 = pmf[w..].iter().sum();
        match alternative {
            Alternative::Less => less,
            Alternative::Greater => greater,
            Alternative::TwoSided => (2.0 * less.min(greater)).min(1.0),
        }
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_sum / 48.0;
        let sd = var.sqrt();
        let std = Normal::standard();
        let dev = w_plus - mean;
        match alternative {
            Alternative::TwoSided => {
                let z = (dev.abs() - 0.5).max(0.0) / sd;
                (2.0 * std.sf(z)).min(1.0)
            }
            Alternative::Greater => std.sf((dev - 0.5) / sd),
            Alternative::Less => std.cdf((dev + 0.5) / sd),
        }
    };
    Ok(WilcoxonResult { statistic: w_plus, p: p.clamp(0.0, 1.0), n_effective: n, exact })
}
