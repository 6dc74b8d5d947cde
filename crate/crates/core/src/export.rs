//! Image and table writers shared by the beam and raster outputs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::format_f64;

/// Binary portable graymap (P5, maxval 255). `pixels` is row-major.
pub fn pgm_bytes(width: usize, height: usize, comment: &str, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::config(format!(
            "image is {width}x{height} but {} pixels were supplied",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(pixels.len() + 64);
    out.extend_from_slice(b"P5\n");
    for line in comment.lines() {
        out.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, comment: &str, pixels: &[u8]) -> Result<()> {
    let bytes = pgm_bytes(width, height, comment, pixels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Linear map of `values` onto 0..=255 with min → 0 and max → 255.
/// A constant input maps to 0.
pub fn scale_to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// `x,y,value` rows for a row-major map with the given coordinates.
pub fn xy_csv(header: &str, xs: &[f64], ys: &[f64], values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 40);
    out.push_str(header);
    out.push('\n');
    for (i, y) in ys.iter().enumerate() {
        for (j, x) in xs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                format_f64(*x),
                format_f64(*y),
                format_f64(values[i * xs.len() + j])
            ));
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
