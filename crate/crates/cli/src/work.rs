//! Artifact layout of the work directory. Each stage reads what earlier
//! stages wrote; a missing file names the command that produces it.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use tripgrid::split::Horizon;

pub struct Work {
    root: PathBuf,
}

impl Work {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.path("synth")
    }

    pub fn located(&self) -> PathBuf {
        self.path("located_trips.csv")
    }

    pub fn extent(&self) -> PathBuf {
        self.path("extent.csv")
    }

    pub fn frames(&self) -> PathBuf {
        self.path("frames")
    }

    pub fn mask(&self) -> PathBuf {
        self.path("mask")
    }

    pub fn split(&self, h: Horizon) -> PathBuf {
        self.path(&format!("split_{}.csv", h.as_str()))
    }

    pub fn ranking(&self, h: Horizon) -> PathBuf {
        self.path(&format!("ranking_{}.csv", h.as_str()))
    }

    pub fn ablation(&self, h: Horizon) -> PathBuf {
        self.path(&format!("ablation_{}.csv", h.as_str()))
    }

    /// `path` must exist; otherwise tell the user which command makes it.
    pub fn require(&self, path: PathBuf, command: &str) -> anyhow::Result<PathBuf> {
        if !path.exists() {
            bail!("missing {}; run `tripgrid {command}` first", path.display());
        }
        Ok(path)
    }

    pub fn open(&self, path: PathBuf, command: &str) -> anyhow::Result<BufReader<File>> {
        let path = self.require(path, command)?;
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Ok(BufReader::new(f))
    }
}

pub fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
