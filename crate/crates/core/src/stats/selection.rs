//! Depth ablation and pairwise configuration comparison.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use super::{apply_holm, non_inferiority_labeled, paired_test, PairedTestResult, Alternative};
use crate::error::{Error, Result};
use crate::lagrank::{top_k, LagRanking};
use crate::mask::MaskedSeries;
use crate::predict::{evaluate, training_norm_factor, EvalConfig, SampleMetrics, Trainer};
use crate::split::SampleIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestConfig {
    pub alpha: f64,
    pub margin_fraction: f64,
    pub eval: EvalConfig,
    /// Run Shapiro–Wilk on the paired differences and record (W, p).
    pub normality: bool,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { alpha: super::DEFAULT_ALPHA, margin_fraction: super::DEFAULT_MARGIN_FRACTION, eval: EvalConfig::default(), normality: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthResult {
    /// Lags per demand type.
    pub n_lags: usize,
    pub lags: Vec<usize>,
    pub mean_mse: f64,
    pub per_sample: Vec<f64>,
}

impl DepthResult {
    /// C = 2n input channels.
    pub fn channels(&self) -> usize {
        2 * self.n_lags
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    /// Deepest first.
    pub depths: Vec<DepthResult>,
    pub min_mse_channels: usize,
    /// NI tests of every shallower depth against the min-MSE depth, Holm-adjusted
    /// as one family. `label_a` is the candidate depth.
    pub ni: Vec<PairedTestResult>,
    pub minimal_ni_channels: usize,
}

fn depth_label(channels: usize) -> String {
    format!("{channels}ch")
}

impl AblationResult {
    pub fn depth(&self, channels: usize) -> Option<&DepthResult> {
        self.depths.iter().find(|d| d.channels() == channels)
    }

    pub fn ni_for(&self, channels: usize) -> Option<&PairedTestResult> {
        let l = depth_label(channels);
        self.ni.iter().find(|t| t.label_a == l)
    }

    /// channels, n_lags, lags, mean val MSE, NI p (raw/Holm), NI decision.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["channels", "n_lags", "lags", "mean_val_mse", "ni_p_raw", "ni_p_adj", "ni_decision", "role"])?;
        for d in &self.depths {
            let c = d.channels();
            let ni = self.ni_for(c);
            let decision = match ni {
                Some(t) if t.reject => "non-inferior",
                Some(_) => "not non-inferior",
                None => "",
            };
            let mut role = Vec::new();
            if c == self.min_mse_channels {
                role.push("min-mse");
            }
            if c == self.minimal_ni_channels {
                role.push("minimal-ni");
            }
            out.write_record([
                c.to_string(),
                d.n_lags.to_string(),
                lag_list(&d.lags),
                d.mean_mse.to_string(),
                ni.map(|t| t.p_raw.to_string()).unwrap_or_default(),
                ni.map(|t| t.p_adj.to_string()).unwrap_or_default(),
                decision.to_string(),
                role.join("+"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn verdict(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:>8}  {:>14}  {:>12}  {:<18}  lags", "channels", "val MSE", "NI p (Holm)", "decision");
        for d in &self.depths {
            let c = d.channels();
            let (p, dec) = match self.ni_for(c) {
                Some(t) => (format!("{:.3e}", t.p_adj), if t.reject { "non-inferior" } else { "not non-inferior" }),
                None if c == self.min_mse_channels => (String::from("-"), "reference"),
                None => (String::from("-"), "-"),
            };
            let _ = writeln!(s, "{c:>8}  {:>14.6}  {p:>12}  {dec:<18}  {{{}}}", d.mean_mse, lag_list(&d.lags));
        }
        let best = self.depth(self.min_mse_channels).expect("min-MSE depth is one of the depths");
        let minimal = self.depth(self.minimal_ni_channels).expect("minimal NI depth is one of the depths");
        let _ = writeln!(s, "Optimal (min-MSE): {} channels, val MSE {:.6}", self.min_mse_channels, best.mean_mse);
        let _ = writeln!(s, "Minimal non-inferior: {} channels, val MSE {:.6}", self.minimal_ni_channels, minimal.mean_mse);
        s
    }
}

pub(crate) fn lag_list(lags: &[usize]) -> String {
    lags.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
}

/// Selection logic on already-evaluated depths: min-MSE depth (ties to fewer
/// channels), NI of every shallower depth against it with one Holm family,
/// minimal NI depth = fewest channels passing (min-MSE depth if none).
pub fn select_depth(mut depths: Vec<DepthResult>, cfg: &TestConfig) -> Result<AblationResult> {
    if depths.is_empty() {
        return Err(Error::EmptyInput("ablation depths"));
    }
    depths.sort_by_key(|d| std::cmp::Reverse(d.n_lags));
    let best = depths
        .iter()
        .min_by(|a, b| a.mean_mse.total_cmp(&b.mean_mse).then(a.n_lags.cmp(&b.n_lags)))
        .expect("non-empty");
    let best_c = best.channels();
    let best_label = depth_label(best_c);
    let mut ni = depths
        .iter()
        .filter(|d| d.n_lags < best.n_lags)
        .map(|d| non_inferiority_labeled(&depth_label(d.channels()), &d.per_sample, &best_label, &best.per_sample, cfg.margin_fraction, cfg.alpha))
        .collect::<Result<Vec<_>>>()?;
    apply_holm(&mut ni, cfg.alpha)?;
    let minimal = depths
        .iter()
        .filter(|d| ni.iter().any(|t| t.reject && t.label_a == depth_label(d.channels())))
        .map(|d| d.channels())
        .min()
        .unwrap_or(best_c);
    Ok(AblationResult { depths, min_mse_channels: best_c, ni, minimal_ni_channels: minimal })
}

/// Trains with the top-n ranked lags for n = n_max down to 1 on identical
/// training data and scores each depth on the validation samples.
pub fn ablate_depth(
    ranking: &LagRanking,
    n_max: usize,
    trainer: &dyn Trainer,
    series: &MaskedSeries,
    train: &[SampleIndex],
    val: &[SampleIndex],
    cfg: &TestConfig,
) -> Result<AblationResult> {
    if n_max < 1 {
        return Err(Error::Config("ablation needs at least one lag".into()));
    }
    let nf = training_norm_factor(series, train)?;
    let depths = (1..=n_max)
        .into_par_iter()
        .map(|n| {
            let lags = top_k(ranking, n)?;
            let model = trainer.fit(series, train, &lags, nf)?;
            let e = evaluate(&model, series, val, &cfg.eval)?;
            Ok(DepthResult { n_lags: n, lags, mean_mse: e.mean.mse, per_sample: e.mse() })
        })
        .collect::<Result<Vec<_>>>()?;
    select_depth(depths, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub label: String,
    pub lags: Vec<usize>,
    pub mean: SampleMetrics,
    pub per_sample_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub configs: Vec<ConfigSummary>,
    /// One entry per unordered pair, Holm-adjusted as one family.
    pub tests: Vec<PairedTestResult>,
}

/// Two-sided Wilcoxon on every unordered pair of per-sample vectors, Holm
/// over all k(k−1)/2 tests.
pub fn compare_vectors(named: &[(String, Vec<f64>)], cfg: &TestConfig) -> Result<Vec<PairedTestResult>> {
    if named.len() < 2 {
        return Err(Error::Config("comparison needs at least two configurations".into()));
    }
    let n = named[0].1.len();
    if n == 0 {
        return Err(Error::EmptyInput("per-sample metrics"));
    }
    if let Some((l, v)) = named.iter().find(|(_, v)| v.len() != n) {
        return Err(Error::ModelMismatch(format!("configuration {l} has {} samples, expected {n}", v.len())));
    }
    let pairs: Vec<(usize, usize)> = (0..named.len()).flat_map(|i| (i + 1..named.len()).map(move |j| (i, j))).collect();
    let mut tests = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (la, a) = &named[i];
            let (lb, b) = &named[j];
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            paired_test(la, lb, a, b, &d, Alternative::TwoSided, None, cfg.normality, cfg.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    apply_holm(&mut tests, cfg.alpha)?;
    Ok(tests)
}

/// Fits each named lag set with the same trainer, training data and
/// normalization, evaluates on `test`, and compares all pairs.
pub fn compare_configs(
    configs: &[(String, Vec<usize>)],
    trainer: &dyn Trainer,
    series: &MaskedSeries,
    train: &[SampleIndex],
    test: &[SampleIndex],
    cfg: &TestConfig,
) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::Config("comparison needs at least two configurations".into()));
    }
    let nf = training_norm_factor(series, train)?;
    let summaries = configs
        .par_iter()
        .map(|(label, lags)| {
            let model = trainer.fit(series, train, lags, nf)?;
            let e = evaluate(&model, series, test, &cfg.eval)?;
            Ok(ConfigSummary { label: label.clone(), lags: lags.clone(), mean: e.mean, per_sample_mse: e.mse() })
        })
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, Vec<f64>)> = summaries.iter().map(|s| (s.label.clone(), s.per_sample_mse.clone())).collect();
    let tests = compare_vectors(&named, cfg)?;
    Ok(Comparison { configs: summaries, tests })
}

impl Comparison {
    pub fn summary(&self, label: &str) -> Option<&ConfigSummary> {
        self.configs.iter().find(|c| c.label == label)
    }

    pub fn test(&self, a: &str, b: &str) -> Option<&PairedTestResult> {
        self.tests.iter().find(|t| (t.label_a == a && t.label_b == b) || (t.label_a == b && t.label_b == a))
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["config", "n_lags", "lags", "mse", "mae", "max_ae", "r2", "n_samples"])?;
        for c in &self.configs {
            out.write_record([
                c.label.clone(),
                c.lags.len().to_string(),
                lag_list(&c.lags),
                c.mean.mse.to_string(),
                c.mean.mae.to_string(),
                c.mean.max_ae.to_string(),
                c.mean.r2.to_string(),
                c.per_sample_mse.len().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn verdict(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<20} {:>6} {:>12} {:>12} {:>10} {:>10}", "configuration", "lags", "MSE", "MAE", "MaxAE", "R2");
        for c in &self.configs {
            let _ = writeln!(s, "{:<20} {:>6} {:>12.6} {:>12.6} {:>10.4} {:>10.4}", c.label, c.lags.len(), c.mean.mse, c.mean.mae, c.mean.max_ae, c.mean.r2);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Holm-corrected pairwise Wilcoxon signed-rank tests (two-sided, per-sample MSE):");
        for t in &self.tests {
            let outcome = match (&t.error, t.better()) {
                (Some(e), _) => e.clone(),
                (None, Some(b)) => format!("significant, better: {b}"),
                (None, None) => "not significant".to_string(),
            };
            let _ = writeln!(s, "  {:<40} W+={:<12} p={:.3e} p_holm={:.3e}  {outcome}", t.name(), t.statistic, t.p_raw, t.p_adj);
        }
        s
    }
}
