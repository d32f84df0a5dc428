//! Image and depth files.
//!
//! Depth is stored as single-channel PFM: the ASCII header `Pf\n<w> <h>\n-1.0\n`
//! followed by `w * h` little-endian `f32` values, bottom row first. A
//! negative scale means little-endian; a positive one big-endian (read only).
//! `0.0` marks invalid depth.
//!
//! Colour is 8-bit RGB PNG. External 16-bit depth PNGs can be read with a
//! millimeter scale.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb as PixelRgb};

use crate::raster::{ColorImage, MapKind, ScalarMap, INVALID_DEPTH};
use crate::{Error, Result};

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    let (w, h) = map.dims();
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&map.get(x, y).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Splits off one whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos)
        .then(|| std::str::from_utf8(&bytes[start..*pos]).ok())
        .flatten()
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut pos = 0;
    match token(&bytes, &mut pos) {
        Some("Pf") => {}
        Some("PF") => return Err(bad("colour PFM is not a depth map")),
        _ => return Err(bad("missing Pf magic")),
    }
    let mut num = |what: &str| token(&bytes, &mut pos).ok_or_else(|| bad(&format!("missing {what}")));
    let w: usize = num("width")?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = num("height")?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = num("scale")?.parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 {
        return Err(bad("zero scale"));
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", w * h * 4, body.len())));
    }
    let mut data = vec![INVALID_DEPTH; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, y_from_bottom) = (i % w, i / w);
        data[(h - 1 - y_from_bottom) * w + x] = v;
    }
    ScalarMap::from_vec(w, h, MapKind::Depth, data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &ColorImage) -> Result<()> {
    let buf: ImageBuffer<PixelRgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().flat_map(|c| c.map(to_u8)).collect(),
    )
    .expect("sized");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Any PNG, converted to RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ColorImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match &img {
        image::DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect(),
        _ => img.to_rgb32f().pixels().map(|p| p.0).collect(),
    };
    ColorImage::from_vec(w, h, data)
}

/// Depth in millimeters as 16-bit grey; out-of-range depths are stored as 0.
pub fn write_depth_png16(path: &Path, depth: &ScalarMap) -> Result<()> {
    let raw: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| {
            let mm = (d as f64 * 1000.0).round();
            if (1.0..=65535.0).contains(&mm) {
                mm as u16
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw).expect("sized");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// 16-bit depth PNG where each unit is `mm_per_unit` millimeters. Zero is invalid.
pub fn read_depth_png16(path: &Path, mm_per_unit: f64) -> Result<ScalarMap> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(path, "depth PNG must be 16-bit greyscale"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data = buf
        .pixels()
        .map(|p| (p.0[0] as f64 * mm_per_unit / 1000.0) as f32)
        .collect();
    ScalarMap::from_vec(w, h, MapKind::Depth, data)
}
