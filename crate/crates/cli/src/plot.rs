//! 8-bit color-mapped heatmaps of count images with a legend sidecar.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use tripgrid::raster::CountImage;

use crate::work::create;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Linear,
    /// ln(1 + v), for heavy-tailed counts.
    Log,
}

fn level(v: u32, max: u32, scale: Scale) -> u8 {
    if max == 0 {
        return 0;
    }
    let f = match scale {
        Scale::Linear => f64::from(v) / f64::from(max),
        Scale::Log => f64::from(v).ln_1p() / f64::from(max).ln_1p(),
    };
    (f * 255.0).round() as u8
}

fn color(level: u8) -> [u8; 3] {
    let c = colorous::VIRIDIS.eval_continuous(f64::from(level) / 255.0);
    [c.r, c.g, c.b]
}

/// Writes `png` and, next to it, `<stem>_legend.csv` mapping each color
/// level to the count range it represents. `px` replicates every cell.
pub fn render(img: &CountImage, scale: Scale, px: usize, png_path: &Path) -> anyhow::Result<std::path::PathBuf> {
    let (rows, cols) = img.shape();
    let px = px.max(1);
    let max = img.max();
    let (w, h) = (cols * px, rows * px);
    let mut data = Vec::with_capacity(w * h * 3);
    for r in 0..rows {
        let line: Vec<u8> = (0..cols)
            .flat_map(|c| color(level(img.get(r, c), max, scale)).repeat(px))
            .collect();
        for _ in 0..px {
            data.extend_from_slice(&line);
        }
    }
    let out = create(png_path)?;
    let mut enc = png::Encoder::new(out, u32::try_from(w)?, u32::try_from(h)?);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().context("png header")?;
    writer.write_image_data(&data).context("png data")?;
    writer.finish().context("png finish")?;

    let stem = png_path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let legend_path = png_path.with_file_name(format!("{stem}_legend.csv"));
    let mut lw = create(&legend_path)?;
    writeln!(lw, "level,count_min,count_max,r,g,b")?;
    let mut v = 0u32;
    while v <= max {
        let l = level(v, max, scale);
        let mut hi = v;
        while hi < max && level(hi + 1, max, scale) == l {
            hi += 1;
        }
        let [r, g, b] = color(l);
        writeln!(lw, "{l},{v},{hi},{r},{g},{b}")?;
        v = hi + 1;
    }
    lw.flush()?;
    Ok(legend_path)
}
