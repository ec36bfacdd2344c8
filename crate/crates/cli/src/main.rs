mod commands;
mod config;
mod plot;
mod work;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chrono::{NaiveDate, NaiveDateTime};
use clap::{Args, Parser, Subcommand};
use tripgrid::geo::BoundaryMode;
use tripgrid::ingest::TripSchema;
use tripgrid::mask::read_mask;
use tripgrid::predict::PredictorSpec;
use tripgrid::raster::{read_frame, CountImage, DstRule};
use tripgrid::split::Horizon;

use commands::{parse_day, LagChoice};
use config::{config_err, ConfigError, RunConfig};
use work::Work;

/// Micromobility trips to hourly demand images, lag selection and
/// statistically tested input configurations.
#[derive(Parser)]
#[command(name = "tripgrid", version)]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory shared by all commands [default: run].
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trips and tracts with planted periodicities.
    Synth(SynthArgs),
    /// Filter trips and attach tract centroids.
    Ingest(IngestArgs),
    /// Aggregate located trips into hourly pick-up / drop-off frames.
    Rasterize(RasterizeArgs),
    /// Build the global activity mask.
    Mask,
    /// Chronological train / validation / test split.
    Split(SplitArgs),
    /// Rank candidate lags on the training subset.
    RankLags(RankArgs),
    /// Depth ablation over the top-ranked lags on the validation subset.
    Ablate(AblateArgs),
    /// Compare lag configurations on the test subset.
    Compare(CompareArgs),
    /// Fit and score one lag configuration.
    Evaluate(EvaluateArgs),
    /// Render a frame or the mask as a color-mapped PNG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory [default: <work>/synth].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    weeks: Option<usize>,
    #[arg(long)]
    tract_rows: Option<usize>,
    #[arg(long)]
    tract_cols: Option<usize>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    trips: Option<PathBuf>,
    #[arg(long)]
    tracts: Option<PathBuf>,
    #[arg(long)]
    boundary: Option<PathBuf>,
    #[arg(long)]
    geoid_key: Option<String>,
    /// Column names of the City of Austin export.
    #[arg(long)]
    austin_schema: bool,
    #[arg(long, value_parser = parse_boundary_mode)]
    boundary_mode: Option<BoundaryMode>,
    #[arg(long)]
    year: Option<i32>,
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    cell_w: Option<f64>,
    #[arg(long)]
    cell_h: Option<f64>,
    #[arg(long, value_parser = parse_day)]
    first_day: Option<NaiveDate>,
    #[arg(long, value_parser = parse_day)]
    last_day: Option<NaiveDate>,
    /// Do not flag the skipped daylight-saving hour as missing.
    #[arg(long)]
    no_dst: bool,
}

#[derive(Args)]
struct HorizonArg {
    /// next-hour | next-24h
    #[arg(long)]
    horizon: Option<Horizon>,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    h: HorizonArg,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    buffer: Option<usize>,
    /// Drop samples whose window touches a nonexistent clock hour.
    #[arg(long)]
    exclude_missing: bool,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    h: HorizonArg,
    #[arg(long)]
    max_lag: Option<usize>,
    /// Comma-separated subset of C_s, C_c, MAE_s, AD_s.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
}

#[derive(Args)]
struct ModelArgs {
    /// Ridge penalty of the linear predictor.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Non-inferiority margin as a fraction of the reference mean.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    h: HorizonArg,
    #[command(flatten)]
    model: ModelArgs,
    /// Deepest configuration, in lags per demand type.
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    h: HorizonArg,
    #[command(flatten)]
    model: ModelArgs,
    /// proposed | recent-adjacent | fixed-period (repeatable).
    #[arg(long)]
    preset: Vec<String>,
    /// Lags per configuration.
    #[arg(long)]
    lags: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    h: HorizonArg,
    #[command(flatten)]
    model: ModelArgs,
    /// Explicit comma-separated lag list.
    #[arg(long, value_delimiter = ',', conflicts_with = "preset")]
    lags: Option<Vec<usize>>,
    #[arg(long)]
    preset: Option<String>,
    /// Lags for a preset.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "test")]
    subset: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Frame hour, e.g. 2019-01-07T08.
    #[arg(long, value_parser = parse_hour, required_unless_present = "mask")]
    at: Option<NaiveDateTime>,
    #[arg(long, default_value = "pickup", value_parser = ["pickup", "dropoff"])]
    channel: String,
    /// Plot the activity mask instead of a frame.
    #[arg(long, conflicts_with = "at")]
    mask: bool,
    #[arg(long, value_enum, default_value = "linear")]
    scale: plot::Scale,
    /// Pixels per grid cell.
    #[arg(long, default_value_t = 4)]
    px: usize,
    /// Output PNG [default: <work>/plots/<name>.png].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_boundary_mode(s: &str) -> Result<BoundaryMode, String> {
    match s {
        "centroid" => Ok(BoundaryMode::Centroid),
        "any-vertex" => Ok(BoundaryMode::AnyVertex),
        _ => Err(format!("unknown boundary mode `{s}` (centroid | any-vertex)")),
    }
}

fn parse_hour(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(&format!("{s}:00"), "%Y-%m-%dT%H:%M")
        .map_err(|e| format!("{s}: {e} (expected YYYY-MM-DDTHH)"))
}

fn horizon(cfg: &RunConfig, h: &HorizonArg) -> Horizon {
    h.horizon.unwrap_or(cfg.horizon)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(l) = m.lambda {
        cfg.predictor = PredictorSpec::Linear { lambda: l };
    }
    if let Some(a) = m.alpha {
        cfg.stats.alpha = a;
    }
    if let Some(x) = m.margin {
        cfg.stats.margin_fraction = x;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    cfg.synth.seed = cfg.seed();
    if let Some(w) = cli.work {
        cfg.paths.work = w;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    let work = Work::new(cfg.paths.work.clone());

    match cli.command {
        Command::Synth(a) => {
            if let Some(w) = a.weeks {
                cfg.synth.weeks = w;
            }
            if let Some(r) = a.tract_rows {
                cfg.synth.tract_rows = r;
            }
            if let Some(c) = a.tract_cols {
                cfg.synth.tract_cols = c;
            }
            commands::synth(&cfg, &work, a.out)
        }
        Command::Ingest(a) => {
            if a.trips.is_some() {
                cfg.paths.trips = a.trips;
            }
            if a.tracts.is_some() {
                cfg.paths.tracts = a.tracts;
            }
            if a.boundary.is_some() {
                cfg.paths.boundary = a.boundary;
            }
            if let Some(k) = a.geoid_key {
                cfg.paths.geoid_key = k;
            }
            if a.austin_schema {
                cfg.schema = TripSchema::austin();
            }
            if let Some(m) = a.boundary_mode {
                cfg.grid.boundary_mode = m;
            }
            if let Some(y) = a.year {
                cfg.filter.year = y;
            }
            if let Some(m) = a.mode {
                cfg.filter.mode = m;
            }
            commands::ingest(&cfg, &work)
        }
        Command::Rasterize(a) => {
            if let Some(w) = a.cell_w {
                cfg.grid.cell_w = w;
            }
            if let Some(h) = a.cell_h {
                cfg.grid.cell_h = h;
            }
            if a.first_day.is_some() {
                cfg.grid.first_day = a.first_day;
            }
            if a.last_day.is_some() {
                cfg.grid.last_day = a.last_day;
            }
            if a.no_dst {
                cfg.grid.dst = DstRule::None;
            }
            commands::rasterize(&cfg, &work)
        }
        Command::Mask => commands::mask(&work),
        Command::Split(a) => {
            if let Some(l) = a.lookback {
                cfg.split.lookback = l;
            }
            if let Some(b) = a.buffer {
                cfg.split.buffer = b;
            }
            cfg.split.exclude_missing |= a.exclude_missing;
            commands::split(&cfg, &work, horizon(&cfg, &a.h))
        }
        Command::RankLags(a) => {
            if a.max_lag.is_some() {
                cfg.lags.max_lag = a.max_lag;
            }
            if let Some(m) = a.metrics {
                cfg.lags.metrics = m;
            }
            commands::rank(&cfg, &work, horizon(&cfg, &a.h))
        }
        Command::Ablate(a) => {
            apply_model(&mut cfg, &a.model);
            if let Some(n) = a.n_max {
                cfg.ablate.n_max = n;
            }
            commands::ablate(&cfg, &work, horizon(&cfg, &a.h))
        }
        Command::Compare(a) => {
            apply_model(&mut cfg, &a.model);
            if !a.preset.is_empty() {
                cfg.compare.presets = a.preset;
            }
            if a.lags.is_some() {
                cfg.compare.n_lags = a.lags;
            }
            commands::compare(&cfg, &work, horizon(&cfg, &a.h))
        }
        Command::Evaluate(a) => {
            apply_model(&mut cfg, &a.model);
            if a.n.is_some() {
                cfg.compare.n_lags = a.n;
            }
            let choice = match (a.lags, a.preset) {
                (Some(l), _) => LagChoice::Explicit(l),
                (None, Some(p)) => LagChoice::Named(p),
                (None, None) => return Err(config_err("evaluate needs --lags or --preset")),
            };
            commands::evaluate_cmd(&cfg, &work, horizon(&cfg, &a.h), choice, &a.subset)
        }
        Command::Plot(a) => plot_cmd(&work, a),
    }
}

fn plot_cmd(work: &Work, a: PlotArgs) -> anyhow::Result<()> {
    let (img, name) = if a.mask {
        let m = read_mask(&work.require(work.mask(), "mask")?)?;
        let (rows, cols) = m.shape();
        let dense: Vec<u32> = m.to_dense().into_iter().map(u32::from).collect();
        (CountImage::from_dense(rows, cols, &dense)?, "mask".to_string())
    } else {
        let at = a.at.expect("clap requires --at without --mask");
        let dir = work.require(work.frames(), "rasterize")?;
        let hour = chrono::Timelike::hour(&at) as u8;
        let f = read_frame(&dir, at.date(), hour).with_context(|| format!("no frame for {at} in {}", dir.display()))?;
        let img = if a.channel == "pickup" { f.pickup } else { f.dropoff };
        (img, format!("{}_{}_{:02}", a.channel, at.format("%Y%m%d"), hour))
    };
    let out = a.out.unwrap_or_else(|| work.root().join("plots").join(format!("{name}.png")));
    let legend = plot::render(&img, a.scale, a.px, &out)?;
    println!("plot: {} (max {}), legend {}", out.display(), img.max(), legend.display());
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.is::<ConfigError>() || c.downcast_ref::<tripgrid::Error>().is_some_and(tripgrid::Error::is_config))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
