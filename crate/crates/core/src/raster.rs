//! Dense raster containers and resampling kernels.
//!
//! All rasters are row-major. Continuous coordinates follow the camera
//! convention: the centre of pixel `(i, j)` is `(i + 0.5, j + 0.5)`.

use nalgebra::Vector3;

use crate::camgeom::Camera;
use crate::{Error, Result};

/// Invalid-depth sentinel. Valid depths are strictly positive.
pub const INVALID_DEPTH: f32 = 0.0;

#[inline]
pub fn is_valid_depth(d: f32) -> bool {
    d > 0.0 && d < f32::INFINITY
}

pub type Rgb = [f32; 3];

/// What the values of a [`ScalarMap`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// Meters, `0.0` marks invalid pixels.
    Depth,
    Mask,
    Weight,
    Alpha,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub kind: MapKind,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

/// Per-pixel world-space unit normals; `None` where no normal could be formed.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Option<Vector3<f64>>>,
}

fn check_len(what: &'static str, width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::DimensionMismatch {
            what,
            expected: (width, height),
            found: (len, 1),
        });
    }
    Ok(())
}

pub(crate) fn check_dims(what: &'static str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { what, expected, found });
    }
    Ok(())
}

impl ScalarMap {
    pub fn filled(width: usize, height: usize, kind: MapKind, value: f32) -> Self {
        ScalarMap {
            width,
            height,
            kind,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, kind: MapKind, data: Vec<f32>) -> Result<Self> {
        check_len("scalar map buffer", width, height, data.len())?;
        Ok(ScalarMap {
            width,
            height,
            kind,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, kind: MapKind, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        ScalarMap {
            width,
            height,
            kind,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    /// Bilinear sample at continuous `(u, v)`. `None` outside `[0, w] x [0, h]`
    /// or, for depth maps, when a tap with non-zero weight is invalid.
    #[inline]
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = (u - 0.5, v - 0.5);
        if x >= 0.0 && y >= 0.0 {
            // Interior: truncation is floor and no tap needs clamping.
            let (i0, j0) = (x as i32 as usize, y as i32 as usize);
            if i0 + 1 < self.width && j0 + 1 < self.height {
                let (fx, fy) = (x - i0 as f64, y - j0 as f64);
                let at = j0 * self.width + i0;
                let (r0, r1) = (&self.data[at..at + 2], &self.data[at + self.width..at + self.width + 2]);
                let taps = [
                    (r0[0], (1.0 - fx) * (1.0 - fy)),
                    (r0[1], fx * (1.0 - fy)),
                    (r1[0], (1.0 - fx) * fy),
                    (r1[1], fx * fy),
                ];
                let depth = self.kind == MapKind::Depth;
                let mut acc = 0.0;
                for &(d, w) in &taps {
                    if w == 0.0 {
                        continue;
                    }
                    if depth && !is_valid_depth(d) {
                        return None;
                    }
                    acc += w * d as f64;
                }
                return Some(acc);
            }
        }
        self.sample_bilinear_clamped(u, v)
    }

    #[cold]
    fn sample_bilinear_clamped(&self, u: f64, v: f64) -> Option<f64> {
        let taps = bilinear_taps(u, v, self.width, self.height)?;
        let mut acc = 0.0;
        for (idx, w) in taps {
            if w == 0.0 {
                continue;
            }
            let d = self.data[idx];
            if self.kind == MapKind::Depth && !is_valid_depth(d) {
                return None;
            }
            acc += w * d as f64;
        }
        Some(acc)
    }

    pub fn with_kind(mut self, kind: MapKind) -> Self {
        self.kind = kind;
        self
    }
}

impl ColorImage {
    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        ColorImage {
            width,
            height,
            data: vec![clamp_rgb(value); width * height],
        }
    }

    /// Builds an image, clamping every channel into `[0, 1]`. Non-finite
    /// channels become zero.
    pub fn from_vec(width: usize, height: usize, mut data: Vec<Rgb>) -> Result<Self> {
        check_len("color image buffer", width, height, data.len())?;
        data.iter_mut().for_each(|c| *c = clamp_rgb(*c));
        Ok(ColorImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| clamp_rgb(f(x, y)))
            .collect();
        ColorImage { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: Rgb) {
        self.data[y * self.width + x] = clamp_rgb(value);
    }

    /// Bilinear sample; `None` outside `[0, w] x [0, h]`.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<Rgb> {
        let taps = bilinear_taps(u, v, self.width, self.height)?;
        let mut acc = [0.0f64; 3];
        for (idx, w) in taps {
            let c = self.data[idx];
            for ch in 0..3 {
                acc[ch] += w * c[ch] as f64;
            }
        }
        Some(acc.map(|x| x as f32))
    }

    /// One channel as a scalar map.
    pub fn channel(&self, ch: usize, kind: MapKind) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            kind,
            data: self.data.iter().map(|c| c[ch]).collect(),
        }
    }
}

#[inline]
fn clamp_rgb(c: Rgb) -> Rgb {
    c.map(|x| if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 })
}

/// The four taps of a bilinear lookup with edge clamping inside the image.
#[inline]
pub(crate) fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && u <= width as f64 && v >= 0.0 && v <= height as f64) {
        return None;
    }
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let clamp_x = |i: f64| (i.max(0.0) as usize).min(width - 1);
    let clamp_y = |i: f64| (i.max(0.0) as usize).min(height - 1);
    let (i0, i1) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (j0, j1) = (clamp_y(y0), clamp_y(y0 + 1.0));
    Some([
        (j0 * width + i0, (1.0 - fx) * (1.0 - fy)),
        (j0 * width + i1, fx * (1.0 - fy)),
        (j1 * width + i0, (1.0 - fx) * fy),
        (j1 * width + i1, fx * fy),
    ])
}

/// 4x4 box average to `(ceil(w/4), ceil(h/4))`. Edge blocks average the
/// pixels they have; depth maps average only valid pixels.
pub fn downscale_quarter(map: &ScalarMap) -> ScalarMap {
    let (ow, oh) = (map.width.div_ceil(4), map.height.div_ceil(4));
    let mut out = ScalarMap::filled(ow, oh, map.kind, 0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut sum, mut n) = (0.0f64, 0u32);
            for y in oy * 4..(oy * 4 + 4).min(map.height) {
                for x in ox * 4..(ox * 4 + 4).min(map.width) {
                    let d = map.get(x, y);
                    if map.kind == MapKind::Depth && !is_valid_depth(d) {
                        continue;
                    }
                    sum += d as f64;
                    n += 1;
                }
            }
            if n > 0 {
                out.set(ox, oy, (sum / n as f64) as f32);
            }
        }
    }
    out
}

/// Colour version of [`downscale_quarter`].
pub fn downscale_quarter_color(img: &ColorImage) -> ColorImage {
    let (ow, oh) = (img.width.div_ceil(4), img.height.div_ceil(4));
    let mut data = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sum = [0.0f64; 3];
            let mut n = 0u32;
            for y in oy * 4..(oy * 4 + 4).min(img.height) {
                for x in ox * 4..(ox * 4 + 4).min(img.width) {
                    let c = img.get(x, y);
                    for ch in 0..3 {
                        sum[ch] += c[ch] as f64;
                    }
                    n += 1;
                }
            }
            data.push(sum.map(|s| (s / n as f64) as f32));
        }
    }
    ColorImage {
        width: ow,
        height: oh,
        data,
    }
}

/// 3x3 max filter, neighbourhood clamped at the borders.
pub fn maxpool3(map: &ScalarMap) -> ScalarMap {
    let (w, h) = map.dims();
    let mut out = map.clone();
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::NEG_INFINITY;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    m = m.max(map.get(xx, yy));
                }
            }
            out.set(x, y, m);
        }
    }
    out
}

/// Bilinear magnification with half-pixel-centre alignment and edge clamping.
/// Invalid-depth sentinels are not treated specially.
pub fn upscale_bilinear(map: &ScalarMap, target_w: usize, target_h: usize) -> ScalarMap {
    let sx = map.width as f64 / target_w as f64;
    let sy = map.height as f64 / target_h as f64;
    let mut out = ScalarMap::filled(target_w, target_h, map.kind, 0.0);
    for y in 0..target_h {
        let v = (y as f64 + 0.5) * sy;
        for x in 0..target_w {
            let u = (x as f64 + 0.5) * sx;
            let taps = bilinear_taps(u, v, map.width, map.height).expect("inside source image");
            let value: f64 = taps.iter().map(|&(i, w)| w * map.data[i] as f64).sum();
            out.set(x, y, value as f32);
        }
    }
    out
}

/// World-space normals from central differences of unprojected neighbours,
/// oriented to face the camera. Border pixels and pixels next to invalid depth
/// get no normal.
pub fn normals_from_depth(depth: &ScalarMap, cam: &Camera) -> Result<NormalMap> {
    if depth.kind != MapKind::Depth {
        return Err(Error::InvalidParameter("normals need a depth map".into()));
    }
    check_dims("depth vs camera", cam.dims(), depth.dims())?;
    let (w, h) = depth.dims();
    let center = cam.center();
    let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = depth.get(x, y);
        is_valid_depth(d).then(|| {
            cam.unproject(x as f64 + 0.5, y as f64 + 0.5, d as f64)
                .expect("valid depth")
        })
    };
    let mut data = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (Some(c), Some(l), Some(r), Some(t), Some(b)) = (
                point(x, y),
                point(x - 1, y),
                point(x + 1, y),
                point(x, y - 1),
                point(x, y + 1),
            ) else {
                continue;
            };
            let Some(mut n) = (r - l).cross(&(b - t)).try_normalize(1e-18) else {
                continue;
            };
            if n.dot(&(c - center)) > 0.0 {
                n = -n;
            }
            data[y * w + x] = Some(n);
        }
    }
    Ok(NormalMap {
        width: w,
        height: h,
        data,
    })
}
