//! 16-bit grayscale PNG persistence for frames, plus the grid and manifest
//! sidecars.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;

use super::{CountImage, DemandFrame, FrameStore, GridSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Pickup,
    Dropoff,
}

impl Channel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Pickup => "pickup",
            Channel::Dropoff => "dropoff",
        }
    }
}

pub fn frame_file_name(channel: Channel, date: NaiveDate, hour: u8) -> String {
    format!("{}_{}_{:02}.png", channel.as_str(), date.format("%Y%m%d"), hour)
}

/// Encode a count image as a 16-bit grayscale PNG with tEXt metadata.
/// Counts above 65535 are rejected before anything is written.
pub fn encode_png16(img: &CountImage, text: &[(&str, String)]) -> Result<Vec<u8>> {
    let (rows, cols) = img.shape();
    if let Some(&(i, v)) = img.nonzero().iter().find(|e| e.1 > u32::from(u16::MAX)) {
        return Err(Error::CountOverflow { row: i as usize / cols, col: i as usize % cols, value: v });
    }
    let mut data = vec![0u8; rows * cols * 2];
    for &(i, v) in img.nonzero() {
        data[2 * i as usize..2 * i as usize + 2].copy_from_slice(&(v as u16).to_be_bytes());
    }

    let img_err = |e: png::EncodingError| Error::Image(e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.clone()).map_err(img_err)?;
        }
        let mut w = enc.write_header().map_err(img_err)?;
        w.write_image_data(&data).map_err(img_err)?;
        w.finish().map_err(img_err)?;
    }
    Ok(out)
}

/// Decode a 16-bit (or 8-bit) grayscale PNG into counts and its tEXt pairs.
pub fn decode_png16(bytes: &[u8]) -> Result<(CountImage, Vec<(String, String)>)> {
    let img_err = |e: png::DecodingError| Error::Image(e.to_string());
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(img_err)?;
    let info = reader.info();
    let (cols, rows) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Image(format!("expected grayscale PNG, found {:?}", info.color_type)));
    }
    let depth = info.bit_depth;
    let text: Vec<(String, String)> = info
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect();
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    reader.next_frame(&mut buf).map_err(img_err)?;

    let values: Vec<u32> = match depth {
        png::BitDepth::Sixteen => buf[..rows * cols * 2]
            .chunks_exact(2)
            .map(|b| u32::from(u16::from_be_bytes([b[0], b[1]])))
            .collect(),
        png::BitDepth::Eight => buf[..rows * cols].iter().map(|&b| u32::from(b)).collect(),
        other => return Err(Error::Image(format!("unsupported bit depth {other:?}"))),
    };
    Ok((CountImage::from_dense(rows, cols, &values)?, text))
}

pub fn write_image_png(img: &CountImage, path: &Path, text: &[(&str, String)]) -> Result<()> {
    let bytes = encode_png16(img, text)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<(CountImage, Vec<(String, String)>)> {
    decode_png16(&fs::read(path)?).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn frame_text(frame: &DemandFrame, channel: Channel) -> Vec<(&'static str, String)> {
    vec![
        ("channel", channel.as_str().to_string()),
        ("date", frame.date.format("%Y-%m-%d").to_string()),
        ("hour", frame.hour.to_string()),
        ("missing", frame.missing.to_string()),
    ]
}

/// Write both channel images of a frame into `dir`.
pub fn write_frame(frame: &DemandFrame, dir: &Path) -> Result<[PathBuf; 2]> {
    let mut paths = [PathBuf::new(), PathBuf::new()];
    for (k, (channel, img)) in [(Channel::Pickup, &frame.pickup), (Channel::Dropoff, &frame.dropoff)]
        .into_iter()
        .enumerate()
    {
        let path = dir.join(frame_file_name(channel, frame.date, frame.hour));
        write_image_png(img, &path, &frame_text(frame, channel))?;
        paths[k] = path;
    }
    Ok(paths)
}

/// Read the frame for (date, hour) from `dir`; the missing flag comes from
/// the pick-up file's metadata.
pub fn read_frame(dir: &Path, date: NaiveDate, hour: u8) -> Result<DemandFrame> {
    let (pickup, text) = read_image_png(&dir.join(frame_file_name(Channel::Pickup, date, hour)))?;
    let (dropoff, _) = read_image_png(&dir.join(frame_file_name(Channel::Dropoff, date, hour)))?;
    if pickup.shape() != dropoff.shape() {
        return Err(Error::ShapeMismatch { expected: pickup.shape(), got: dropoff.shape() });
    }
    let missing = text.iter().any(|(k, v)| k == "missing" && v == "true");
    Ok(DemandFrame { date, hour, pickup, dropoff, missing })
}

/// GridSpec as `key=value` lines.
pub fn write_grid<W: Write>(g: &GridSpec, mut w: W) -> Result<()> {
    writeln!(w, "origin_x={}", g.origin_x)?;
    writeln!(w, "origin_y={}", g.origin_y)?;
    writeln!(w, "cell_w={}", g.cell_w)?;
    writeln!(w, "cell_h={}", g.cell_h)?;
    writeln!(w, "rows={}", g.rows)?;
    writeln!(w, "cols={}", g.cols)?;
    Ok(())
}

pub fn read_grid<R: BufRead>(r: R) -> Result<GridSpec> {
    let mut vals = std::collections::HashMap::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("grid line `{line}` is not key=value")))?;
        vals.insert(k.trim().to_string(), v.trim().to_string());
    }
    fn get<T: std::str::FromStr>(vals: &std::collections::HashMap<String, String>, k: &str) -> Result<T> {
        vals.get(k)
            .ok_or_else(|| Error::Parse(format!("grid file lacks `{k}`")))?
            .parse()
            .map_err(|_| Error::Parse(format!("grid value for `{k}` is not a number")))
    }
    let g = GridSpec {
        origin_x: get(&vals, "origin_x")?,
        origin_y: get(&vals, "origin_y")?,
        cell_w: get(&vals, "cell_w")?,
        cell_h: get(&vals, "cell_h")?,
        rows: get(&vals, "rows")?,
        cols: get(&vals, "cols")?,
    };
    g.validate()?;
    Ok(g)
}

pub const GRID_FILE: &str = "grid.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Write every frame plus `grid.txt` and `manifest.csv` into `dir`.
pub fn write_store(store: &FrameStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_grid(store.grid(), BufWriter::new(File::create(dir.join(GRID_FILE))?))?;
    store
        .frames()
        .par_iter()
        .map(|f| write_frame(f, dir).map(|_| ()))
        .collect::<Result<()>>()?;

    let mut m = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(MANIFEST_FILE))?));
    m.write_record(["hour_index", "date", "hour", "channel", "file", "missing", "total"])?;
    for (t, f) in store.frames().iter().enumerate() {
        for (channel, img) in [(Channel::Pickup, &f.pickup), (Channel::Dropoff, &f.dropoff)] {
            m.write_record([
                t.to_string(),
                f.date.format("%Y-%m-%d").to_string(),
                f.hour.to_string(),
                channel.as_str().to_string(),
                frame_file_name(channel, f.date, f.hour),
                f.missing.to_string(),
                img.sum().to_string(),
            ])?;
        }
    }
    m.flush()?;
    Ok(())
}

/// Inverse of [`write_store`].
pub fn read_store(dir: &Path) -> Result<FrameStore> {
    let grid = read_grid(BufReader::new(File::open(dir.join(GRID_FILE))?))?;
    let mut hours: Vec<(usize, NaiveDate, u8)> = Vec::new();
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?));
    for rec in rdr.records() {
        let rec = rec?;
        let parse_err = || Error::Parse(format!("bad manifest row {rec:?}"));
        if rec.get(3) != Some(Channel::Pickup.as_str()) {
            continue;
        }
        let t: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let date = rec
            .get(1)
            .and_then(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
            .ok_or_else(parse_err)?;
        let hour: u8 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        hours.push((t, date, hour));
    }
    hours.sort_unstable();
    let start = hours
        .first()
        .map(|h| h.1)
        .ok_or(Error::EmptyInput("frame manifest lists no frames"))?;
    let frames = hours
        .par_iter()
        .map(|&(_, d, h)| read_frame(dir, d, h))
        .collect::<Result<Vec<_>>>()?;
    FrameStore::from_frames(grid, start, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_with_extremes() {
        let img = CountImage::from_dense(2, 3, &[0, 1, 65535, 7, 0, 300]).unwrap();
        let bytes = encode_png16(&img, &[("channel", "pickup".into())]).unwrap();
        let (back, text) = decode_png16(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(text, vec![("channel".to_string(), "pickup".to_string())]);
        assert_eq!(encode_png16(&img, &[]).unwrap(), encode_png16(&img, &[]).unwrap());
    }

    #[test]
    fn overflow_rejected() {
        let img = CountImage::from_dense(1, 2, &[0, 65536]).unwrap();
        assert!(matches!(
            encode_png16(&img, &[]),
            Err(Error::CountOverflow { row: 0, col: 1, value: 65536 })
        ));
    }

    #[test]
    fn corrupt_file_is_image_error() {
        assert!(matches!(decode_png16(b"not a png"), Err(Error::Image(_))));
    }

    #[test]
    fn grid_text_round_trip() {
        let g = GridSpec { origin_x: 601_234.567_8, origin_y: 3_370_000.125, cell_w: 240.0, cell_h: 220.0, rows: 241, cols: 217 };
        let mut buf = Vec::new();
        write_grid(&g, &mut buf).unwrap();
        assert_eq!(read_grid(buf.as_slice()).unwrap(), g);
    }
}
