use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

// Small enough to run the whole chain in seconds; the lookback still
// admits nine daily lags for the next-24h presets.
const CONFIG: &str = r#"
seed = 7

[synth]
weeks = 8
tract_rows = 4
tract_cols = 4

[split]
lookback = 240
buffer = 1
fractions = [0.5, 0.25, 0.25]

[ablate]
n_max = 4

[stats]
normality = false
"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Self { dir }
    }

    fn work(&self) -> PathBuf {
        self.dir.path().join("work")
    }

    fn raw(&self, args: &[&str]) -> Output {
        let cfg = self.dir.path().join("run.toml");
        Command::new(env!("CARGO_BIN_EXE_tripgrid"))
            .args(["--config", cfg.to_str().unwrap(), "--work", self.work().to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    }

    /// Runs and asserts success; returns stdout.
    fn ok(&self, args: &[&str]) -> String {
        let out = self.raw(args);
        assert!(
            out.status.success(),
            "tripgrid {args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stderr),
            String::from_utf8_lossy(&out.stdout)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepare(&self, horizons: &[&str]) {
        for cmd in ["synth", "ingest", "rasterize", "mask"] {
            self.ok(&[cmd]);
        }
        for h in horizons {
            self.ok(&["split", "--horizon", h]);
        }
    }
}

fn lag_line<'a>(stdout: &'a str, name: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name}: ")))
        .unwrap_or_else(|| panic!("no lag line for {name} in\n{stdout}"))
}

#[test]
fn synth_then_full_chain() {
    let r = Run::new();
    r.prepare(&["next-hour"]);
    let ranking = r.ok(&["rank-lags"]);
    assert!(ranking.contains("Lag ranking (next-hour)"));
    let ablation = r.ok(&["ablate"]);
    assert!(ablation.contains("Minimal non-inferior:"));
    let cmp = r.ok(&["compare"]);
    assert!(cmp.contains("(minimal non-inferior depth)"), "{cmp}");
    assert!(cmp.contains("Holm-corrected pairwise Wilcoxon"), "{cmp}");
    for name in ["proposed", "recent-adjacent", "fixed-period"] {
        lag_line(&cmp, name);
    }
    let eval = r.ok(&["evaluate", "--lags", "1,24,168", "--subset", "val"]);
    assert!(eval.contains("lags {1,24,168}"));
    r.ok(&["plot", "--at", "2019-01-08T08", "--channel", "dropoff"]);
    r.ok(&["plot", "--mask", "--scale", "log"]);

    let w = r.work();
    for f in [
        "kept_trips.csv",
        "filter_report.csv",
        "filter_report.txt",
        "centroids.csv",
        "located_trips.csv",
        "frames/manifest.csv",
        "mask/mask.png",
        "split_next-hour.csv",
        "ranking_next-hour.csv",
        "ablation_next-hour.csv",
        "compare_next-hour_summary.csv",
        "compare_next-hour_tests.csv",
        "compare_next-hour.txt",
        "eval_custom_next-hour_val_per_sample.csv",
        "plots/dropoff_20190108_08.png",
        "plots/dropoff_20190108_08_legend.csv",
        "plots/mask_legend.csv",
    ] {
        assert!(w.join(f).exists(), "missing {f}");
    }
    let legend = fs::read_to_string(w.join("plots/mask_legend.csv")).unwrap();
    assert_eq!(legend.lines().count(), 3, "{legend}");
}

#[test]
fn presets_and_missing_ranking() {
    let r = Run::new();
    r.prepare(&["next-hour", "next-24h"]);
    let out = r.ok(&["compare", "--preset", "fixed-period", "--horizon", "next-24h"]);
    assert_eq!(lag_line(&out, "fixed-period"), "{24,48,72,96,120,144,168,192,216}");
    let out = r.ok(&["compare", "--preset", "recent-adjacent", "--horizon", "next-hour"]);
    let all: Vec<String> = (1..=18).map(|l| l.to_string()).collect();
    assert_eq!(lag_line(&out, "recent-adjacent"), format!("{{{}}}", all.join(",")));

    // "proposed" needs a ranking that was never computed here.
    let out = r.raw(&["compare", "--preset", "proposed", "--preset", "fixed-period"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tripgrid rank-lags"), "{err}");
}

#[test]
fn missing_upstream_artifacts_name_the_command() {
    let r = Run::new();
    for (args, needed) in [
        (&["mask"][..], "tripgrid rasterize"),
        (&["rasterize"][..], "tripgrid ingest"),
        (&["ingest"][..], "tripgrid synth"),
        (&["plot", "--mask"][..], "tripgrid mask"),
    ] {
        let out = r.raw(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needed), "{args:?}: {err}");
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    let r = Run::new();
    let bad = r.dir.path().join("bad.toml");
    fs::write(&bad, "[split]\nlookback = \"long\"\n").unwrap();
    let unknown = r.dir.path().join("unknown.toml");
    fs::write(&unknown, "[spilt]\nlookback = 3\n").unwrap();
    let fractions = r.dir.path().join("fractions.toml");
    fs::write(&fractions, "[split]\nfractions = [0.5, 0.5, 0.5]\n").unwrap();
    let exe = env!("CARGO_BIN_EXE_tripgrid");
    let work = r.work();
    let code = |args: &[&str]| {
        Command::new(exe).args(["--work", work.to_str().unwrap()]).args(args).output().unwrap().status.code()
    };
    assert_eq!(code(&["--config", bad.to_str().unwrap(), "mask"]), Some(2));
    assert_eq!(code(&["--config", unknown.to_str().unwrap(), "mask"]), Some(2));
    assert_eq!(code(&["--config", "/nonexistent/run.toml", "mask"]), Some(2));
    assert_eq!(code(&["--config", fractions.to_str().unwrap(), "split"]), Some(2));
    assert_eq!(code(&["--threads", "0", "mask"]), Some(2));
    assert_eq!(code(&["ingest", "--trips", "/nonexistent/trips.csv"]), Some(2));
    assert_eq!(code(&["compare", "--preset", "bogus"]), Some(2));
    assert_eq!(code(&["split", "--horizon", "next-week"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn reruns_are_byte_identical() {
    let chain = |r: &Run| {
        r.prepare(&["next-hour"]);
        r.ok(&["rank-lags"]);
        r.ok(&["--threads", "1", "compare", "--lags", "3"]);
        r.ok(&["plot", "--at", "2019-01-09T17"]);
        snapshot(&r.work())
    };
    let (a, b) = (Run::new(), Run::new());
    let (sa, sb) = (chain(&a), chain(&b));
    assert!(sa.len() > 20);
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    // A different seed changes the data.
    let c = Run::new();
    c.ok(&["--seed", "8", "synth"]);
    assert_ne!(fs::read(c.work().join("synth/trips.csv")).unwrap(), sa[Path::new("synth/trips.csv")]);
}
