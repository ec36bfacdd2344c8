//! Stacked lag-channel inputs, closed-form baseline predictors and the
//! masked evaluation metrics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{ActivityMask, MaskedSeries};
use crate::raster::FrameStore;
use crate::split::SampleIndex;

/// C = 2n channels: pick-up at each lag, then drop-off at each lag. Raw
/// counts are kept; [`InputTensor::value`] applies the scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub lags: Vec<usize>,
    pub norm_factor: f64,
    pub rows: usize,
    pub cols: usize,
    raw: Vec<Vec<f64>>,
}

impl InputTensor {
    pub fn channels(&self) -> usize {
        self.raw.len()
    }

    /// Normalized value of channel `ch` at row-major pixel `i`.
    pub fn value(&self, ch: usize, i: usize) -> f64 {
        self.raw[ch][i] / self.norm_factor
    }

    /// Normalized channel as a row-major vector.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.raw[ch].iter().map(|v| v / self.norm_factor).collect()
    }

    fn raw(&self, ch: usize) -> &[f64] {
        &self.raw[ch]
    }
}

/// Ground truth (pick-up, drop-off) in original counts, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub rows: usize,
    pub cols: usize,
    pub pickup: Vec<f64>,
    pub dropoff: Vec<f64>,
}

fn check_lags(lags: &[usize], t: usize) -> Result<()> {
    if lags.is_empty() {
        return Err(Error::Config("lag list is empty".into()));
    }
    if let Some(&lag) = lags.iter().find(|&&l| l == 0 || l > t) {
        return Err(Error::LagOutOfRange { lag, target: t });
    }
    Ok(())
}

/// Full-grid input tensor and target for target hour `t`.
pub fn build_input(store: &FrameStore, t: usize, lags: &[usize], norm_factor: f64) -> Result<(InputTensor, TargetPair)> {
    check_lags(lags, t)?;
    if t >= store.len() {
        return Err(Error::Insufficient(format!("target {t} beyond the {} stored frames", store.len())));
    }
    let (rows, cols) = store.grid().shape();
    let dense = |img: &crate::raster::CountImage| img.to_dense().into_iter().map(f64::from).collect::<Vec<f64>>();
    let mut raw: Vec<Vec<f64>> = lags.iter().map(|&l| dense(&store.frame(t - l).pickup)).collect();
    raw.extend(lags.iter().map(|&l| dense(&store.frame(t - l).dropoff)));
    let target = TargetPair { rows, cols, pickup: dense(&store.frame(t).pickup), dropoff: dense(&store.frame(t).dropoff) };
    Ok((InputTensor { lags: lags.to_vec(), norm_factor, rows, cols, raw }, target))
}

/// Input restricted to Ω (rows = 1, cols = |Ω|) from a masked series.
pub fn build_masked_input(series: &MaskedSeries, t: usize, lags: &[usize], norm_factor: f64) -> Result<(InputTensor, TargetPair)> {
    check_lags(lags, t)?;
    if t >= series.len() {
        return Err(Error::Insufficient(format!("target {t} beyond the {} stored frames", series.len())));
    }
    let n = series.support();
    let mut raw: Vec<Vec<f64>> = lags.iter().map(|&l| series.pickup(t - l).to_vec()).collect();
    raw.extend(lags.iter().map(|&l| series.dropoff(t - l).to_vec()));
    let target = TargetPair { rows: 1, cols: n, pickup: series.pickup(t).to_vec(), dropoff: series.dropoff(t).to_vec() };
    Ok((InputTensor { lags: lags.to_vec(), norm_factor, rows: 1, cols: n, raw }, target))
}

/// Largest pixel over frames 0 ..= last training target, the leakage-safe
/// scaling constant (1 when the window is all zero).
pub fn training_norm_factor(series: &MaskedSeries, train: &[SampleIndex]) -> Result<f64> {
    let last = train
        .iter()
        .map(|s| s.target)
        .max()
        .ok_or(Error::EmptyInput("no training samples"))?;
    let m = series.max_value(0, (last + 1).min(series.len()));
    Ok(if m > 0.0 { m } else { 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorSpec {
    /// Returns the frame at one lag unchanged.
    Persistence { lag: usize },
    /// Ridge regression on the stacked channels, one coefficient vector per
    /// output channel shared by all cells.
    Linear { lambda: f64 },
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec::Linear { lambda: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorModel {
    Persistence {
        lag: usize,
        lags: Vec<usize>,
        norm_factor: f64,
    },
    Linear {
        lags: Vec<usize>,
        lambda: f64,
        norm_factor: f64,
        /// (intercept, channel weights…) for pick-up and drop-off outputs.
        beta: [Vec<f64>; 2],
    },
}

/// Anything that fits a model from masked training samples.
pub trait Trainer: Sync {
    fn fit(&self, series: &MaskedSeries, train: &[SampleIndex], lags: &[usize], norm_factor: f64) -> Result<PredictorModel>;
}

impl Trainer for PredictorSpec {
    fn fit(&self, series: &MaskedSeries, train: &[SampleIndex], lags: &[usize], norm_factor: f64) -> Result<PredictorModel> {
        match *self {
            PredictorSpec::Persistence { lag } => {
                if !lags.contains(&lag) {
                    return Err(Error::Config(format!("persistence lag {lag} is not in the lag list {lags:?}")));
                }
                Ok(PredictorModel::Persistence { lag, lags: lags.to_vec(), norm_factor })
            }
            PredictorSpec::Linear { lambda } => fit_linear(series, train, lags, lambda, norm_factor),
        }
    }
}

/// Samples per partial Gram matrix; partials are summed in order so the fit
/// is bit-identical regardless of thread count.
const GRAM_CHUNK: usize = 32;

/// Closed-form ridge: (XᵀX + λI) β_k = Xᵀ y_k over every (sample, cell in Ω)
/// row, features (1, X_1, …, X_C). The intercept is penalized too.
pub fn fit_linear(series: &MaskedSeries, train: &[SampleIndex], lags: &[usize], lambda: f64, norm_factor: f64) -> Result<PredictorModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge lambda {lambda} must be finite and ≥ 0")));
    }
    if !(norm_factor > 0.0) {
        return Err(Error::Config(format!("norm factor {norm_factor} must be positive")));
    }
    let p = 2 * lags.len() + 1;
    let rows = train.len() * series.support();
    if rows < p {
        return Err(Error::Insufficient(format!("{rows} masked equations for {p} coefficients")));
    }
    for s in train {
        check_lags(lags, s.target)?;
    }

    let partials: Vec<(Vec<f64>, [Vec<f64>; 2])> = train
        .par_chunks(GRAM_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; p * p];
            let mut b = [vec![0.0; p], vec![0.0; p]];
            let mut x = vec![0.0; p];
            for s in chunk {
                let (input, target) = build_masked_input(series, s.target, lags, norm_factor).expect("lags checked");
                for i in 0..series.support() {
                    x[0] = 1.0;
                    for ch in 0..p - 1 {
                        x[ch + 1] = input.value(ch, i);
                    }
                    for a in 0..p {
                        let xa = x[a];
                        if xa == 0.0 {
                            continue;
                        }
                        for c in a..p {
                            g[a * p + c] += xa * x[c];
                        }
                        b[0][a] += xa * target.pickup[i];
                        b[1][a] += xa * target.dropoff[i];
                    }
                }
            }
            (g, b)
        })
        .collect();

    let mut g = vec![0.0; p * p];
    let mut b = [vec![0.0; p], vec![0.0; p]];
    for (pg, pb) in partials {
        g.iter_mut().zip(pg).for_each(|(a, v)| *a += v);
        for k in 0..2 {
            b[k].iter_mut().zip(&pb[k]).for_each(|(a, v)| *a += v);
        }
    }
    for a in 0..p {
        for c in 0..a {
            g[a * p + c] = g[c * p + a];
        }
        g[a * p + a] += lambda;
    }

    let beta = solve_spd(p, &g, &b)?;
    Ok(PredictorModel::Linear { lags: lags.to_vec(), lambda, norm_factor, beta })
}

/// Solve G β = b for both right-hand sides by Cholesky.
fn solve_spd(p: usize, g: &[f64], b: &[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]> {
    let gm = DMatrix::from_row_slice(p, p, g);
    let scale = (0..p).map(|i| gm[(i, i)]).fold(0.0, f64::max);
    let chol = gm.cholesky().ok_or(Error::SingularSystem)?;
    let l = chol.l_dirty();
    let min_pivot = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::SingularSystem);
    }
    let solve = |rhs: &[f64]| -> Result<Vec<f64>> {
        let beta = chol.solve(&DVector::from_column_slice(rhs));
        if beta.iter().all(|v| v.is_finite()) {
            Ok(beta.iter().copied().collect())
        } else {
            Err(Error::SingularSystem)
        }
    };
    Ok([solve(&b[0])?, solve(&b[1])?])
}

impl PredictorModel {
    pub fn lags(&self) -> &[usize] {
        match self {
            PredictorModel::Persistence { lags, .. } | PredictorModel::Linear { lags, .. } => lags,
        }
    }

    pub fn norm_factor(&self) -> f64 {
        match self {
            PredictorModel::Persistence { norm_factor, .. } | PredictorModel::Linear { norm_factor, .. } => *norm_factor,
        }
    }

    /// Non-negative (pick-up, drop-off) prediction, row-major like the input.
    pub fn predict(&self, input: &InputTensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.lags != self.lags() {
            return Err(Error::ModelMismatch(format!("model lags {:?}, input lags {:?}", self.lags(), input.lags)));
        }
        let n = input.rows * input.cols;
        match self {
            PredictorModel::Persistence { lag, lags, .. } => {
                let j = lags.iter().position(|l| l == lag).expect("validated at fit");
                Ok((input.raw(j).to_vec(), input.raw(lags.len() + j).to_vec()))
            }
            PredictorModel::Linear { beta, norm_factor, .. } => {
                if input.norm_factor != *norm_factor {
                    return Err(Error::ModelMismatch(format!(
                        "model norm factor {norm_factor}, input {}",
                        input.norm_factor
                    )));
                }
                let apply = |b: &[f64]| -> Vec<f64> {
                    (0..n)
                        .map(|i| {
                            let z = b[0] + (0..input.channels()).map(|ch| b[ch + 1] * input.value(ch, i)).sum::<f64>();
                            z.max(0.0)
                        })
                        .collect()
                };
                Ok((apply(&beta[0]), apply(&beta[1])))
            }
        }
    }

    /// Model as `field,value` CSV rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let lags = self.lags().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";");
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["field", "value"])?;
        match self {
            PredictorModel::Persistence { lag, .. } => {
                out.write_record(["kind", "persistence"])?;
                out.write_record(["lag", &lag.to_string()])?;
            }
            PredictorModel::Linear { lambda, beta, .. } => {
                out.write_record(["kind", "linear"])?;
                out.write_record(["lambda", &lambda.to_string()])?;
                out.write_record(["beta_pickup", &join(&beta[0])])?;
                out.write_record(["beta_dropoff", &join(&beta[1])])?;
            }
        }
        out.write_record(["lags", &lags])?;
        out.write_record(["norm_factor", &self.norm_factor().to_string()])?;
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for rec in csv::Reader::from_reader(r).records() {
            let rec = rec?;
            if let (Some(k), Some(v)) = (rec.get(0), rec.get(1)) {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Parse(format!("model file lacks `{k}`")));
        fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
            s.split(';')
                .filter(|x| !x.is_empty())
                .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad list item `{x}`"))))
                .collect()
        }
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}`"))) };
        let lags: Vec<usize> = list(get("lags")?)?;
        let norm_factor = num("norm_factor")?;
        match get("kind")?.as_str() {
            "persistence" => Ok(PredictorModel::Persistence { lag: num("lag")? as usize, lags, norm_factor }),
            "linear" => {
                let beta = [list(get("beta_pickup")?)?, list(get("beta_dropoff")?)?];
                if beta.iter().any(|b| b.len() != 2 * lags.len() + 1) {
                    return Err(Error::Parse("coefficient count does not match the lag list".into()));
                }
                Ok(PredictorModel::Linear { lags, lambda: num("lambda")?, norm_factor, beta })
            }
            k => Err(Error::Parse(format!("unknown model kind `{k}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Stabilizer added to the R² denominator, in squared demand units.
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { epsilon: 1e-8 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mse: f64,
    pub mae: f64,
    pub max_ae: f64,
    pub r2: f64,
}

/// Metrics from prediction and target values already restricted to Ω.
pub fn metrics_on_support(pred: [&[f64]; 2], target: [&[f64]; 2], cfg: &EvalConfig) -> Result<SampleMetrics> {
    let n = target[0].len();
    if n == 0 {
        return Err(Error::EmptyInput("empty activity mask"));
    }
    if pred.iter().chain(&target).any(|v| v.len() != n) {
        return Err(Error::ShapeMismatch { expected: (2, n), got: (2, pred[0].len()) });
    }
    let (mut se, mut ae, mut max_ae, mut ss_tot) = (0.0, 0.0, 0.0f64, 0.0);
    for k in 0..2 {
        let mean = target[k].iter().sum::<f64>() / n as f64;
        for (y, yh) in target[k].iter().zip(pred[k]) {
            let e = yh - y;
            se += e * e;
            ae += e.abs();
            max_ae = max_ae.max(e.abs());
            ss_tot += (y - mean) * (y - mean);
        }
    }
    let denom = 2.0 * n as f64;
    Ok(SampleMetrics { mse: se / denom, mae: ae / denom, max_ae, r2: 1.0 - se / (ss_tot + cfg.epsilon) })
}

/// Masked MSE, MAE (denominator 2|Ω|), MaxAE over both channels and masked
/// R² for full-grid row-major images.
pub fn masked_metrics(pred: (&[f64], &[f64]), target: &TargetPair, mask: &ActivityMask, cfg: &EvalConfig) -> Result<SampleMetrics> {
    cfg.validate()?;
    let shape = (target.rows, target.cols);
    let g = |v: &[f64]| crate::mask::apply_mask(v, shape, mask);
    let (pp, pd, yp, yd) = (g(pred.0)?, g(pred.1)?, g(&target.pickup)?, g(&target.dropoff)?);
    metrics_on_support([&pp, &pd], [&yp, &yd], cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub targets: Vec<usize>,
    pub per_sample: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl Evaluation {
    pub fn mse(&self) -> Vec<f64> {
        self.per_sample.iter().map(|m| m.mse).collect()
    }

    pub fn write_per_sample_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["target_hour_index", "mse", "mae", "max_ae", "r2"])?;
        for (t, m) in self.targets.iter().zip(&self.per_sample) {
            out.write_record([t.to_string(), m.mse.to_string(), m.mae.to_string(), m.max_ae.to_string(), m.r2.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "mean", "n_samples"])?;
        let n = self.per_sample.len().to_string();
        for (name, v) in [("mse", self.mean.mse), ("mae", self.mean.mae), ("r2", self.mean.r2), ("max_ae", self.mean.max_ae)] {
            out.write_record([name, &v.to_string(), &n])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-sample metrics in sample order plus their arithmetic means.
pub fn evaluate(model: &PredictorModel, series: &MaskedSeries, samples: &[SampleIndex], cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate"));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let (input, target) = build_masked_input(series, s.target, model.lags(), model.norm_factor())?;
            let (pp, pd) = model.predict(&input)?;
            metrics_on_support([&pp, &pd], [&target.pickup, &target.dropoff], cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_sample.len() as f64;
    let mean = SampleMetrics {
        mse: per_sample.iter().map(|m| m.mse).sum::<f64>() / k,
        mae: per_sample.iter().map(|m| m.mae).sum::<f64>() / k,
        max_ae: per_sample.iter().map(|m| m.max_ae).sum::<f64>() / k,
        r2: per_sample.iter().map(|m| m.r2).sum::<f64>() / k,
    };
    Ok(Evaluation { targets: samples.iter().map(|s| s.target).collect(), per_sample, mean })
}
