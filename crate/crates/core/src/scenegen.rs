//! Synthetic multi-view RGB-D sequences.
//!
//! Scenes are built from textured planes, spheres and axis-aligned boxes,
//! optionally translating at constant velocity. Colour and depth are produced
//! by exact ray-primitive intersection; colours are unlit procedural textures
//! evaluated in object space so they move with the object.
//!
//! [`voxel_tsdf_oracle`] is a classic dense-grid TSDF used to cross-check the
//! image-space fusion.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::{Camera, CameraEntry};
use crate::imgtsdf::{fusion_weight_map, signed_distance, TsdfParams};
use crate::raster::{check_dims, is_valid_depth, ColorImage, MapKind, Rgb, ScalarMap, INVALID_DEPTH};
use crate::{Error, Point3, Result};

/// Largest oracle grid side, in voxels.
pub const MAX_GRID: usize = 192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Square patch through `center`; unbounded when `half_size` is absent.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        #[serde(default)]
        half_size: Option<f64>,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    Solid {
        color: Rgb,
    },
    /// 3-D checkerboard with cubes of side `size`.
    Checker {
        a: Rgb,
        b: Rgb,
        size: f64,
    },
    /// Sinusoidal ramp between `a` and `b` along `axis`.
    Gradient {
        a: Rgb,
        b: Rgb,
        axis: [f64; 3],
        period: f64,
    },
    /// Sum of a few randomly oriented sinusoids per channel.
    Waves {
        seed: u64,
        period: f64,
    },
}

impl Texture {
    /// Colour at object-space point `p`. `flat` is the face normal on planar
    /// surfaces; the checker ignores that axis so a face lying on a cell
    /// boundary does not flicker between parities.
    fn eval(&self, p: &Point3, flat: Option<Vector3<f64>>) -> Rgb {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, size } => {
                let p = flat.map_or(*p, |n| p - n * n.dot(p));
                let parity = (p.x / size).floor() as i64 + (p.y / size).floor() as i64 + (p.z / size).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { a, b, axis, period } => {
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * p.dot(&Vector3::from(*axis)) / period).sin();
                [0, 1, 2].map(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t) as f32)
            }
            Texture::Waves { seed, period } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                [0, 1, 2].map(|_| {
                    let mut v = 0.0;
                    for _ in 0..3 {
                        let dir = Vector3::new(
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        );
                        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        v += (std::f64::consts::TAU * p.dot(&dir) / period + phase).sin();
                    }
                    (0.5 + v / 6.0).clamp(0.0, 1.0) as f32
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// Meters per second.
    #[serde(default)]
    pub velocity: Option<[f64; 3]>,
}

impl Primitive {
    pub fn new(shape: Shape, texture: Texture) -> Self {
        Primitive {
            shape,
            texture,
            velocity: None,
        }
    }

    pub fn moving(mut self, velocity: [f64; 3]) -> Self {
        self.velocity = Some(velocity);
        self
    }

    fn offset(&self, time: f64) -> Vector3<f64> {
        self.velocity.map_or(Vector3::zeros(), |v| Vector3::from(v) * time)
    }

    fn validate(&self) -> Result<()> {
        let ok = match &self.shape {
            Shape::Plane { normal, half_size, .. } => {
                Vector3::from(*normal).norm() > 1e-12 && half_size.is_none_or(|h| h > 0.0)
            }
            Shape::Sphere { radius, .. } => *radius > 0.0,
            Shape::Box { min, max } => (0..3).all(|i| max[i] > min[i]),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "degenerate primitive {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Nearest ray parameter `s > 0` of `o + s d`, in object space, with the
    /// face normal when the hit surface is flat.
    fn intersect(&self, o: &Point3, d: &Vector3<f64>) -> Option<(f64, Option<Vector3<f64>>)> {
        const EPS: f64 = 1e-9;
        match &self.shape {
            Shape::Plane {
                center,
                normal,
                half_size,
            } => {
                let n = Vector3::from(*normal).normalize();
                let c = Vector3::from(*center);
                let denom = n.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let s = n.dot(&(c - o)) / denom;
                if s <= EPS {
                    return None;
                }
                if let Some(h) = half_size {
                    let (t1, t2) = plane_axes(&n);
                    let q = o + d * s - c;
                    if q.dot(&t1).abs() > *h || q.dot(&t2).abs() > *h {
                        return None;
                    }
                }
                Some((s, Some(n)))
            }
            Shape::Sphere { center, radius } => {
                let oc = o - Vector3::from(*center);
                let a = d.dot(d);
                let b = 2.0 * d.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .find(|&s| s > EPS)
                    .map(|s| (s, None))
            }
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut lo_axis, mut hi_axis) = (0, 0);
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i] < min[i] || o[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
                    if a.min(b) > lo {
                        lo = a.min(b);
                        lo_axis = i;
                    }
                    if a.max(b) < hi {
                        hi = a.max(b);
                        hi_axis = i;
                    }
                }
                if hi < lo {
                    return None;
                }
                let axis = |i: usize| {
                    let mut n = Vector3::zeros();
                    n[i] = 1.0;
                    Some(n)
                };
                [(lo, axis(lo_axis)), (hi, axis(hi_axis))]
                    .into_iter()
                    .find(|&(s, _)| s > EPS)
            }
        }
    }
}

/// Two in-plane unit axes for a unit normal.
fn plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = (helper - n * n.dot(&helper)).normalize();
    (t1, n.cross(&t1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub rig: Vec<CameraEntry>,
    pub frames: usize,
    pub fps: f64,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, rig: &[Camera], frames: usize, fps: f64) -> Result<Self> {
        let spec = SceneSpec {
            primitives,
            rig: rig
                .iter()
                .enumerate()
                .map(|(i, c)| CameraEntry::from_camera(format!("cam{i:02}"), c))
                .collect(),
            frames,
            fps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rig.is_empty() {
            return Err(Error::InvalidParameter("scene rig is empty".into()));
        }
        if !(self.fps > 0.0) || self.frames == 0 {
            return Err(Error::InvalidParameter("scene needs frames > 0 and fps > 0".into()));
        }
        self.primitives.iter().try_for_each(Primitive::validate)?;
        self.cameras().map(|_| ())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.rig.iter().map(CameraEntry::to_camera).collect()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serialises")
    }
}

/// Closest hit along a world ray at frame time `time`: ray parameter and colour.
fn trace(spec: &SceneSpec, o: &Point3, d: &Vector3<f64>, time: f64) -> Option<(f64, Rgb)> {
    let mut best: Option<(f64, Rgb)> = None;
    for prim in &spec.primitives {
        let off = prim.offset(time);
        let local = o - off;
        if let Some((s, flat)) = prim.intersect(&local, d) {
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, prim.texture.eval(&(local + d * s), flat)));
            }
        }
    }
    best
}

/// Colour and exact depth of frame `t` seen from `cam`. Misses are black with
/// invalid depth.
pub fn render_scene(spec: &SceneSpec, cam: &Camera, t: usize) -> Result<(ColorImage, ScalarMap)> {
    if t >= spec.frames {
        return Err(Error::InvalidParameter(format!(
            "frame {t} out of range ({} frames)",
            spec.frames
        )));
    }
    let time = t as f64 / spec.fps;
    let (w, h) = cam.dims();
    let o = cam.center();
    let pixels: Vec<(Rgb, f32)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            // The direction has unit camera-z, so the ray parameter is depth.
            let d = cam.depth_direction((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            trace(spec, &o, &d, time).map_or(([0.0; 3], INVALID_DEPTH), |(s, c)| (c, s as f32))
        })
        .collect();
    let (colors, depths): (Vec<Rgb>, Vec<f32>) = pixels.into_iter().unzip();
    Ok((
        ColorImage::from_vec(w, h, colors)?,
        ScalarMap::from_vec(w, h, MapKind::Depth, depths)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Std of additive Gaussian depth noise, meters.
    pub sigma: f64,
    /// Fraction of valid pixels set invalid.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Perturbs valid depths. `stream` separates frames and views drawn from the
/// same seed.
pub fn add_noise(depth: &ScalarMap, spec: &NoiseSpec, stream: u64) -> Result<ScalarMap> {
    if !(spec.sigma >= 0.0) || !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::InvalidParameter(format!("invalid noise {spec:?}")));
    }
    let normal = Normal::new(0.0, spec.sigma).expect("sigma >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut out = depth.clone();
    for d in out.data.iter_mut() {
        if !is_valid_depth(*d) {
            continue;
        }
        let drop = rng.gen::<f64>() < spec.dropout;
        let n = normal.sample(&mut rng);
        *d = if drop {
            INVALID_DEPTH
        } else {
            let v = (*d as f64 + n) as f32;
            if is_valid_depth(v) {
                v
            } else {
                INVALID_DEPTH
            }
        };
    }
    Ok(out)
}

struct Grid {
    origin: Point3,
    voxel: f64,
    dims: [usize; 3],
    /// Fused signed distance (positive behind surfaces); NaN where unobserved.
    values: Vec<f32>,
}

impl Grid {
    fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[(k * self.dims[1] + j) * self.dims[0] + i]
    }

    /// Trilinear value over the observed corners; `None` if none is observed
    /// or `p` is outside.
    fn sample(&self, p: &Point3) -> Option<f64> {
        let g = (p - self.origin) / self.voxel;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(g[a] >= 0.0) || g[a] > (self.dims[a] - 1) as f64 {
                return None;
            }
            let b = (g[a].floor() as usize).min(self.dims[a].saturating_sub(2));
            base[a] = b;
            frac[a] = g[a] - b as f64;
        }
        let (mut v, mut wsum) = (0.0, 0.0);
        for c in 0..8 {
            let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let (i, j, k) = (
                (base[0] + di).min(self.dims[0] - 1),
                (base[1] + dj).min(self.dims[1] - 1),
                (base[2] + dk).min(self.dims[2] - 1),
            );
            let x = self.at(i, j, k);
            if x.is_nan() {
                continue;
            }
            let wgt = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            v += wgt * x as f64;
            wsum += wgt;
        }
        (wsum > 1e-9).then(|| v / wsum)
    }
}

/// Dense volumetric fusion followed by per-pixel ray marching with trilinear
/// interpolation and zero-crossing refinement.
///
/// The grid spans the bounding box of all back-projected valid depths grown
/// by `4 tau`. Each voxel averages the truncated signed distances of the
/// views observing it within `tau` of their surface, weighted by the same
/// per-pixel fusion weights as the image-space TSDF. Voxels only seen far in
/// front of surfaces hold `-tau`.
pub fn voxel_tsdf_oracle(
    inputs: &[(Camera, ScalarMap)],
    target: &Camera,
    voxel: f64,
    params: &TsdfParams,
) -> Result<ScalarMap> {
    params.validate()?;
    if !(voxel > 0.0) {
        return Err(Error::InvalidParameter(format!("voxel size must be > 0, got {voxel}")));
    }
    let (w, h) = target.dims();
    let mut out = ScalarMap::filled(w, h, MapKind::Depth, INVALID_DEPTH);
    let tau = params.tau;

    let (mut lo, mut hi) = (Point3::repeat(f64::INFINITY), Point3::repeat(f64::NEG_INFINITY));
    for (cam, depth) in inputs {
        check_dims("oracle input depth", cam.dims(), depth.dims())?;
        for y in 0..depth.height {
            for x in 0..depth.width {
                let d = depth.get(x, y);
                if is_valid_depth(d) {
                    let p = cam.unproject(x as f64 + 0.5, y as f64 + 0.5, d as f64)?;
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if !(lo.x <= hi.x) {
        return Ok(out);
    }
    let margin = Vector3::repeat(4.0 * tau);
    let origin = lo - margin;
    let extent = hi + margin - origin;
    let dims = [0, 1, 2].map(|a| (extent[a] / voxel).ceil() as usize + 1);
    if dims.iter().any(|&n| n > MAX_GRID) {
        return Err(Error::SceneOutOfBounds(format!(
            "grid {dims:?} exceeds {MAX_GRID} voxels per side at voxel size {voxel}"
        )));
    }

    let weights: Vec<ScalarMap> = inputs.iter().map(|(_, d)| fusion_weight_map(d, params)).collect();
    let values: Vec<f32> = (0..dims[0] * dims[1] * dims[2])
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1]));
            let p = origin + Vector3::new(i as f64, j as f64, k as f64) * voxel;
            let (mut num, mut den, mut free) = (0.0, 0.0, false);
            for ((cam, depth), wmap) in inputs.iter().zip(&weights) {
                let Some(s) = signed_distance(&p, cam, depth) else {
                    continue;
                };
                if s < -tau {
                    free = true;
                    continue;
                }
                let q = cam.project(&p).expect("projected above");
                let x = (q.u.max(0.0) as usize).min(cam.width - 1);
                let y = (q.v.max(0.0) as usize).min(cam.height - 1);
                let wk = wmap.get(x, y) as f64;
                num += wk * s.clamp(-tau, tau);
                den += wk;
            }
            if den > 0.0 {
                (num / den) as f32
            } else if free {
                -tau as f32
            } else {
                f32::NAN
            }
        })
        .collect();
    let grid = Grid {
        origin,
        voxel,
        dims,
        values,
    };

    let o = target.center();
    let far = origin + extent;
    out.data.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        let d = target.depth_direction((idx % w) as f64 + 0.5, (idx / w) as f64 + 0.5);
        // Clip the ray to the grid box.
        let (mut s0, mut s1) = (params.near, params.far);
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < origin[a] || o[a] > far[a] {
                    return;
                }
                continue;
            }
            let (t0, t1) = ((origin[a] - o[a]) / d[a], (far[a] - o[a]) / d[a]);
            s0 = s0.max(t0.min(t1));
            s1 = s1.min(t0.max(t1));
        }
        if s1 <= s0 {
            return;
        }
        let step = 0.5 * voxel / d.norm();
        let value = |s: f64| grid.sample(&(o + d * s));
        let mut prev: Option<(f64, f64)> = None;
        let mut s = s0;
        while s <= s1 {
            match value(s) {
                Some(v) if v >= 0.0 => {
                    if let Some((sp, vp)) = prev.filter(|&(_, vp)| vp < 0.0) {
                        let (mut a, mut b, mut va, mut vb) = (sp, s, vp, v);
                        for _ in 0..6 {
                            let m = 0.5 * (a + b);
                            match value(m) {
                                Some(vm) if vm >= 0.0 => {
                                    b = m;
                                    vb = vm;
                                }
                                Some(vm) => {
                                    a = m;
                                    va = vm;
                                }
                                None => break,
                            }
                        }
                        *slot = (a + (b - a) * (-va) / (vb - va)) as f32;
                        return;
                    }
                    prev = Some((s, v));
                }
                Some(v) => prev = Some((s, v)),
                None => prev = None,
            }
            s += step;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solid() -> Texture {
        Texture::Solid { color: [0.5; 3] }
    }

    #[test]
    fn checker_on_cell_boundary_is_stable() {
        let (a, b) = ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let cam = Camera::identity(150.0, 64, 48);
        let prim = Primitive::new(
            Shape::Plane {
                center: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, -1.0],
                half_size: None,
            },
            Texture::Checker { a, b, size: 0.1 },
        );
        let spec = SceneSpec::new(vec![prim], std::slice::from_ref(&cam), 1, 30.0).unwrap();
        let (color, _) = render_scene(&spec, &cam, 0).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                let (wx, wy) = (
                    (x as f64 + 0.5 - 32.0) / 150.0 * 2.0,
                    (y as f64 + 0.5 - 24.0) / 150.0 * 2.0,
                );
                let (fx, fy) = (wx / 0.1, wy / 0.1);
                // Skip pixels whose centre sits on a cell edge.
                if (fx - fx.round()).abs() < 1e-6 || (fy - fy.round()).abs() < 1e-6 {
                    continue;
                }
                let even = (fx.floor() as i64 + fy.floor() as i64).rem_euclid(2) == 0;
                assert_eq!(color.get(x, y), if even { a } else { b }, "pixel ({x}, {y})");
            }
        }
    }

    fn plane(z: f64, half: Option<f64>) -> Primitive {
        Primitive::new(
            Shape::Plane {
                center: [0.0, 0.0, z],
                normal: [0.0, 0.0, -1.0],
                half_size: half,
            },
            Texture::Checker {
                a: [0.9, 0.1, 0.1],
                b: [0.1, 0.1, 0.9],
                size: 0.1,
            },
        )
    }

    #[test]
    fn fronto_parallel_plane_depth_is_exact() {
        let cam = Camera::identity(200.0, 64, 48);
        let spec = SceneSpec::new(vec![plane(2.0, None)], std::slice::from_ref(&cam), 1, 30.0).unwrap();
        let (img, depth) = render_scene(&spec, &cam, 0).unwrap();
        assert!(depth.data.iter().all(|&d| d == 2.0));
        assert!(img.data.iter().all(|c| *c == [0.9, 0.1, 0.1] || *c == [0.1, 0.1, 0.9]));
        assert!(render_scene(&spec, &cam, 1).is_err());
    }

    #[test]
    fn sphere_silhouette_area() {
        let (f, r, z) = (400.0, 0.25, 3.0);
        let cam = Camera::identity(f, 512, 512);
        let sphere = Primitive::new(
            Shape::Sphere {
                center: [0.0, 0.0, z],
                radius: r,
            },
            solid(),
        );
        let spec = SceneSpec::new(vec![sphere], std::slice::from_ref(&cam), 1, 30.0).unwrap();
        let (_, depth) = render_scene(&spec, &cam, 0).unwrap();
        let count = depth.data.iter().filter(|&&d| is_valid_depth(d)).count() as f64;
        let approx_area = std::f64::consts::PI * r * r * f * f / (z * z);
        assert!(
            (count - approx_area).abs() <= 0.02 * approx_area,
            "{count} vs {approx_area}"
        );
        // Exact silhouette of an on-axis sphere: tangent cone of half-angle asin(r / z).
        let exact = std::f64::consts::PI * (f * r / (z * z - r * r).sqrt()).powi(2);
        assert!((count - exact).abs() <= 0.01 * exact, "{count} vs {exact}");
    }

    #[test]
    fn sphere_depth_matches_closed_form() {
        let cam = Camera::identity(100.0, 40, 40);
        let sphere = Primitive::new(
            Shape::Sphere {
                center: [0.1, 0.0, 2.0],
                radius: 0.4,
            },
            solid(),
        );
        let spec = SceneSpec::new(vec![sphere], std::slice::from_ref(&cam), 1, 30.0).unwrap();
        let (_, depth) = render_scene(&spec, &cam, 0).unwrap();
        let (x, y) = (24usize, 20usize);
        let d = cam.depth_direction(x as f64 + 0.5, y as f64 + 0.5);
        // |s d - c|^2 = r^2, solved by hand for the near root.
        let c = Vector3::new(0.1, 0.0, 2.0);
        let (a, b, cc) = (d.dot(&d), -2.0 * d.dot(&c), c.dot(&c) - 0.16);
        let s = (-b - (b * b - 4.0 * a * cc).sqrt()) / (2.0 * a);
        assert_relative_eq!(depth.get(x, y) as f64, s, max_relative = 1e-6);
    }

    #[test]
    fn moving_box_boundary() {
        let (f, w) = (100.0, 101);
        let cam = Camera::identity(f, w, 21);
        let bx = Primitive::new(
            Shape::Box {
                min: [-0.2, -0.5, 1.9],
                max: [0.2, 0.5, 2.1],
            },
            solid(),
        )
        .moving([0.1, 0.0, 0.0]);
        let spec = SceneSpec::new(vec![bx], std::slice::from_ref(&cam), 5, 1.0).unwrap();
        for t in 0..5 {
            let (_, depth) = render_scene(&spec, &cam, t).unwrap();
            let left = -0.2 + 0.1 * t as f64;
            let right = 0.2 + 0.1 * t as f64;
            // Front face at z = 1.9: edges project to f x / z + cx.
            let lo = f * left / 1.9 + cam.cx;
            let hi = f * right / 1.9 + cam.cx;
            for x in 0..w {
                let c = x as f64 + 0.5;
                let hit = is_valid_depth(depth.get(x, 10));
                if c > lo + 0.5 && c < hi - 0.5 {
                    assert!(hit, "t={t} x={x}");
                }
                if c < lo - 0.5 - f * 0.2 / 1.9 || c > hi + 0.5 + f * 0.2 / 1.9 {
                    assert!(!hit, "t={t} x={x}");
                }
            }
            assert_eq!(depth.get(((lo + hi) / 2.0) as usize, 10), 1.9);
        }
    }

    #[test]
    fn noise_identity_and_statistics() {
        let depth = ScalarMap::filled(400, 250, MapKind::Depth, 2.0);
        let same = add_noise(&depth, &NoiseSpec::default(), 0).unwrap();
        assert_eq!(same, depth);

        let sigma = 0.005;
        let noisy = add_noise(
            &depth,
            &NoiseSpec {
                sigma,
                dropout: 0.0,
                seed: 7,
            },
            3,
        )
        .unwrap();
        let diffs: Vec<f64> = noisy.data.iter().map(|&d| d as f64 - 2.0).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - sigma).abs() <= 0.03 * sigma, "{std}");

        let dropped = add_noise(
            &depth,
            &NoiseSpec {
                sigma: 0.0,
                dropout: 0.1,
                seed: 7,
            },
            3,
        )
        .unwrap();
        let frac = dropped.data.iter().filter(|&&d| !is_valid_depth(d)).count() as f64 / n;
        assert!((frac - 0.1).abs() <= 0.005, "{frac}");

        let again = add_noise(
            &depth,
            &NoiseSpec {
                sigma,
                dropout: 0.0,
                seed: 7,
            },
            3,
        )
        .unwrap();
        assert_eq!(again, noisy);
        let other = add_noise(
            &depth,
            &NoiseSpec {
                sigma,
                dropout: 0.0,
                seed: 7,
            },
            4,
        )
        .unwrap();
        assert_ne!(other, noisy);
        assert!(add_noise(
            &depth,
            &NoiseSpec {
                sigma: -1.0,
                ..NoiseSpec::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn scene_toml_round_trip() {
        let cam = Camera::identity(100.0, 16, 12);
        let spec = SceneSpec::new(
            vec![
                plane(2.0, Some(0.5)),
                Primitive::new(
                    Shape::Sphere {
                        center: [0.0, 0.0, 1.5],
                        radius: 0.2,
                    },
                    Texture::Waves { seed: 4, period: 0.3 },
                )
                .moving([0.0, 0.1, 0.0]),
            ],
            &[cam],
            3,
            30.0,
        )
        .unwrap();
        let back = SceneSpec::parse(&spec.to_toml(), Path::new("scene.toml")).unwrap();
        assert_eq!(back, spec);
        assert!(SceneSpec::parse("frames = 1", Path::new("bad.toml")).is_err());
    }

    #[test]
    fn degenerate_primitives_rejected() {
        let cam = Camera::identity(100.0, 16, 12);
        let bad = Primitive::new(
            Shape::Sphere {
                center: [0.0; 3],
                radius: 0.0,
            },
            solid(),
        );
        assert!(SceneSpec::new(vec![bad], std::slice::from_ref(&cam), 1, 30.0).is_err());
        assert!(SceneSpec::new(vec![], &[], 1, 30.0).is_err());
    }

    #[test]
    fn oracle_plane() {
        let cam = Camera::identity(120.0, 80, 60);
        let mut b = cam.clone();
        b.translation = Vector3::new(-0.1, 0.0, 0.0);
        let spec = SceneSpec::new(vec![plane(2.0, Some(0.4))], &[cam.clone(), b.clone()], 1, 30.0).unwrap();
        let inputs: Vec<_> = [cam.clone(), b]
            .iter()
            .map(|c| (c.clone(), render_scene(&spec, c, 0).unwrap().1))
            .collect();
        let out = voxel_tsdf_oracle(&inputs, &cam, 0.005, &TsdfParams::default()).unwrap();
        let hits: Vec<f32> = out.data.iter().copied().filter(|&d| is_valid_depth(d)).collect();
        assert!(hits.len() > 1000);
        assert!(
            hits.iter().all(|&d| (d - 2.0).abs() <= 0.005),
            "{:?}",
            hits.iter().fold(0.0f32, |m, d| m.max((d - 2.0).abs()))
        );
    }

    #[test]
    fn oracle_empty_and_oversized() {
        let cam = Camera::identity(50.0, 20, 10);
        let empty = vec![(cam.clone(), ScalarMap::filled(20, 10, MapKind::Depth, INVALID_DEPTH))];
        let out = voxel_tsdf_oracle(&empty, &cam, 0.005, &TsdfParams::default()).unwrap();
        assert!(out.data.iter().all(|&d| d == INVALID_DEPTH));
        let wide = vec![(cam.clone(), ScalarMap::filled(20, 10, MapKind::Depth, 5.0))];
        assert!(matches!(
            voxel_tsdf_oracle(&wide, &cam, 0.005, &TsdfParams::default()),
            Err(Error::SceneOutOfBounds(_))
        ));
    }
}
