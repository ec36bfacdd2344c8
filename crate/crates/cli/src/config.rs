//! TOML run configuration. Every section is optional; command-line flags
//! override the file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use tripgrid::geo::{BoundaryMode, ProjectionSpec};
use tripgrid::ingest::{FilterConfig, TripSchema};
use tripgrid::lagrank::LagMetric;
use tripgrid::predict::{EvalConfig, PredictorSpec};
use tripgrid::raster::{DstRule, DEFAULT_CELL_H, DEFAULT_CELL_W};
use tripgrid::split::{Horizon, SplitSpec};
use tripgrid::stats::TestConfig;
use tripgrid::synth::SynthConfig;

/// Bad configuration: exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness (synthetic data, normality subsampling).
    pub seed: Option<u64>,
    pub horizon: Horizon,
    pub paths: Paths,
    pub schema: TripSchema,
    pub filter: FilterConfig,
    pub projection: ProjectionSpec,
    pub grid: GridConfig,
    pub split: SplitConfig,
    pub lags: LagConfig,
    pub predictor: PredictorSpec,
    pub stats: StatsConfig,
    pub ablate: AblateConfig,
    pub compare: CompareConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub trips: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub boundary: Option<PathBuf>,
    /// Artifact directory shared by all stages.
    pub work: PathBuf,
    /// GeoJSON property holding the tract identifier.
    pub geoid_key: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self { trips: None, tracts: None, boundary: None, work: PathBuf::from("run"), geoid_key: "GEOID".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cell_w: f64,
    pub cell_h: f64,
    /// Defaults to the first and last trip day.
    pub first_day: Option<NaiveDate>,
    pub last_day: Option<NaiveDate>,
    pub dst: DstRule,
    pub boundary_mode: BoundaryMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cell_w: DEFAULT_CELL_W,
            cell_h: DEFAULT_CELL_H,
            first_day: None,
            last_day: None,
            dst: DstRule::UnitedStates,
            boundary_mode: BoundaryMode::Centroid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub lookback: usize,
    pub buffer: usize,
    pub fractions: [f64; 3],
    /// Drop samples whose window touches a nonexistent (DST) hour.
    pub exclude_missing: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self { lookback: s.lookback, buffer: s.buffer, fractions: s.fractions, exclude_missing: false }
    }
}

impl SplitConfig {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec { lookback: self.lookback, buffer: self.buffer, fractions: self.fractions }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagConfig {
    /// Largest candidate lag; defaults to the split lookback.
    pub max_lag: Option<usize>,
    pub metrics: Vec<String>,
}

impl Default for LagConfig {
    fn default() -> Self {
        Self { max_lag: None, metrics: LagMetric::DEFAULT.iter().map(|m| m.name().to_string()).collect() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
    pub margin_fraction: f64,
    pub epsilon: f64,
    pub normality: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let t = TestConfig::default();
        Self { alpha: t.alpha, margin_fraction: t.margin_fraction, epsilon: t.eval.epsilon, normality: t.normality }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub n_max: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { n_max: 18 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub presets: Vec<String>,
    /// Lags per configuration; defaults to the ablation's minimal
    /// non-inferior depth, else 18 (next-hour) / 9 (next-24h).
    pub n_lags: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { presets: vec!["proposed".into(), "recent-adjacent".into(), "fixed-period".into()], n_lags: None }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.synth.seed)
    }

    pub fn max_lag(&self) -> usize {
        self.lags.max_lag.unwrap_or(self.split.lookback)
    }

    pub fn metrics(&self) -> anyhow::Result<Vec<LagMetric>> {
        self.lags
            .metrics
            .iter()
            .map(|m| m.parse::<LagMetric>().map_err(anyhow::Error::from))
            .collect::<anyhow::Result<Vec<_>>>()
            .context("lags.metrics")
    }

    pub fn test_config(&self) -> TestConfig {
        TestConfig {
            alpha: self.stats.alpha,
            margin_fraction: self.stats.margin_fraction,
            eval: EvalConfig { epsilon: self.stats.epsilon },
            normality: self.stats.normality,
            seed: self.seed(),
        }
    }
}
