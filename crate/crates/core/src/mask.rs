//! Global binary activity mask M and its active support Ω.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{read_image_png, write_image_png, CountImage, FrameStore};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMask {
    rows: usize,
    cols: usize,
    /// Row-major flat indices of Ω, ascending.
    omega: Vec<u32>,
}

impl ActivityMask {
    /// Mask from row-major flat indices of active cells (any order).
    pub fn from_indices(rows: usize, cols: usize, mut cells: Vec<u32>) -> Result<Self> {
        cells.sort_unstable();
        cells.dedup();
        if let Some(&i) = cells.last() {
            if i as usize >= rows * cols {
                return Err(Error::ShapeMismatch { expected: (rows, cols), got: (i as usize / cols.max(1) + 1, cols) });
            }
        }
        Ok(Self { rows, cols, omega: cells })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, omega: (0..(rows * cols) as u32).collect() }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// |Ω|.
    pub fn active_count(&self) -> usize {
        self.omega.len()
    }

    pub fn is_active(&self, r: usize, c: usize) -> bool {
        self.omega.binary_search(&((r * self.cols + c) as u32)).is_ok()
    }

    /// Ω as row-major flat indices.
    pub fn indices(&self) -> &[u32] {
        &self.omega
    }

    /// Ω as (row, col), row-major order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.omega
            .iter()
            .map(|&i| (i as usize / self.cols, i as usize % self.cols))
            .collect()
    }

    /// M as a 0/1 grid, row-major.
    pub fn to_dense(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.rows * self.cols];
        for &i in &self.omega {
            m[i as usize] = 1;
        }
        m
    }

    /// Values of a count image at Ω.
    pub fn gather(&self, img: &CountImage) -> Result<Vec<f64>> {
        if img.shape() != self.shape() {
            return Err(Error::ShapeMismatch { expected: self.shape(), got: img.shape() });
        }
        Ok(img.gather(&self.omega))
    }
}

/// M(r,c) = 1 iff the cell has any pick-up or drop-off over the whole store.
pub fn build_mask(store: &FrameStore) -> ActivityMask {
    build_mask_range(store, 0, store.len())
}

/// Mask from frames [from, to) only (e.g. the training window).
pub fn build_mask_range(store: &FrameStore, from: usize, to: usize) -> ActivityMask {
    let (rows, cols) = store.grid().shape();
    let active = store.frames()[from..to]
        .par_iter()
        .fold(
            || vec![false; rows * cols],
            |mut acc, f| {
                for &(i, _) in f.pickup.nonzero().iter().chain(f.dropoff.nonzero()) {
                    acc[i as usize] = true;
                }
                acc
            },
        )
        .reduce(
            || vec![false; rows * cols],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
                a
            },
        );
    let omega = active
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| i as u32)
        .collect();
    ActivityMask { rows, cols, omega }
}

/// Every frame of a store gathered at Ω: one contiguous |Ω|-vector per frame
/// and channel, so lag scans and model fits never touch off-support pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeries {
    n: usize,
    pickup: Vec<f64>,
    dropoff: Vec<f64>,
    len: usize,
}

impl MaskedSeries {
    pub fn new(store: &FrameStore, m: &ActivityMask) -> Result<Self> {
        if store.grid().shape() != m.shape() {
            return Err(Error::ShapeMismatch { expected: m.shape(), got: store.grid().shape() });
        }
        let n = m.active_count();
        let gathered: Vec<(Vec<f64>, Vec<f64>)> = store
            .frames()
            .par_iter()
            .map(|f| (f.pickup.gather(&m.omega), f.dropoff.gather(&m.omega)))
            .collect();
        let mut pickup = Vec::with_capacity(n * store.len());
        let mut dropoff = Vec::with_capacity(n * store.len());
        for (p, d) in gathered {
            pickup.extend(p);
            dropoff.extend(d);
        }
        Ok(Self { n, pickup, dropoff, len: store.len() })
    }

    /// Series from per-frame vectors already restricted to a support of size `n`.
    pub fn from_vectors(n: usize, pickup: Vec<Vec<f64>>, dropoff: Vec<Vec<f64>>) -> Result<Self> {
        if pickup.len() != dropoff.len() || pickup.iter().chain(&dropoff).any(|v| v.len() != n) {
            return Err(Error::ShapeMismatch { expected: (pickup.len(), n), got: (dropoff.len(), n) });
        }
        let len = pickup.len();
        Ok(Self { n, pickup: pickup.concat(), dropoff: dropoff.concat(), len })
    }

    /// |Ω|.
    pub fn support(&self) -> usize {
        self.n
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pickup(&self, t: usize) -> &[f64] {
        &self.pickup[t * self.n..(t + 1) * self.n]
    }

    pub fn dropoff(&self, t: usize) -> &[f64] {
        &self.dropoff[t * self.n..(t + 1) * self.n]
    }

    /// Largest value over frames [from, to) in either channel.
    pub fn max_value(&self, from: usize, to: usize) -> f64 {
        let r = from * self.n..to * self.n;
        self.pickup[r.clone()].iter().chain(&self.dropoff[r]).fold(0.0, |a, &b| a.max(b))
    }
}

/// Values of a dense row-major image at Ω.
pub fn apply_mask(image: &[f64], shape: (usize, usize), m: &ActivityMask) -> Result<Vec<f64>> {
    if shape != m.shape() || image.len() != shape.0 * shape.1 {
        return Err(Error::ShapeMismatch { expected: m.shape(), got: shape });
    }
    Ok(m.omega.iter().map(|&i| image[i as usize]).collect())
}

pub const MASK_PNG: &str = "mask.png";
pub const OMEGA_CSV: &str = "omega.csv";

/// `mask.png` (16-bit 0/1) and `omega.csv` (k, row, col) in `dir`.
pub fn write_mask(m: &ActivityMask, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let img = CountImage::from_indices(m.rows, m.cols, m.omega.clone());
    write_image_png(&img, &dir.join(MASK_PNG), &[("active_count", m.active_count().to_string())])?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(OMEGA_CSV))?));
    w.write_record(["k", "row", "col"])?;
    for (k, (r, c)) in m.cells().into_iter().enumerate() {
        w.write_record([k.to_string(), r.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask(dir: &Path) -> Result<ActivityMask> {
    let (img, _) = read_image_png(&dir.join(MASK_PNG))?;
    if let Some(&(i, v)) = img.nonzero().iter().find(|e| e.1 != 1) {
        return Err(Error::Image(format!("mask pixel {i} has value {v}, expected 0/1")));
    }
    let (rows, cols) = img.shape();
    ActivityMask::from_indices(rows, cols, img.nonzero().iter().map(|e| e.0).collect())
}
