//! Image-space TSDF.
//!
//! The signed distance at a world point is never stored in a grid. It is
//! evaluated on demand by projecting the point into each input depth map
//! (`s_k = z_k - D_k[u_k, v_k]`, positive behind the observed surface),
//! truncating to `[-tau, tau]` and fusing with per-view confidence weights
//! derived from local depth variation. Observations more than `tau` in front
//! of their surface carry no weight; a point seen only that way is free space.
//!
//! The previous frame's novel-view depth joins the fusion as one more depth
//! map, weighted by how static the target pixel is and by how much weight has
//! accumulated there over time.
//!
//! Rays are marched from the target camera in units of target depth. The
//! fused value is normalised by the weight sum so steps are metric.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::{Camera, MIN_DEPTH};
use crate::raster::{check_dims, is_valid_depth, ColorImage, MapKind, ScalarMap, INVALID_DEPTH};
use crate::splat::{gaussians_with_scalar, render_splats_with_scalar, SplatParams, SplatRender};
use crate::{Error, Point3, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsdfParams {
    /// Truncation distance, meters.
    pub tau: f64,
    /// Side of the square neighbourhood used for fusion weights (odd).
    pub window: usize,
    /// March step as a fraction of the fused distance.
    pub step_factor: f64,
    pub bisection_steps: usize,
    /// Upper bound of the temporal fusion weight.
    pub eta: f64,
    /// Scale of the previous-frame contribution.
    pub beta_tmp: f64,
    pub near: f64,
    pub far: f64,
    /// Smallest step, as a fraction of `tau`.
    pub min_step_fraction: f64,
    /// Consecutive unobserved samples tolerated before a ray is abandoned.
    pub skip_budget: usize,
    /// Hard cap on samples per ray.
    pub max_steps: usize,
    /// Divide the fused value by the weight sum.
    pub normalize: bool,
    /// Start each ray where the first observation can possibly occur.
    pub empty_space_skip: bool,
    /// Accumulated weight is capped at `acc_cap_factor * eta`.
    pub acc_cap_factor: f64,
}

impl Default for TsdfParams {
    fn default() -> Self {
        TsdfParams {
            tau: 0.02,
            window: 7,
            step_factor: 0.8,
            bisection_steps: 3,
            eta: 15.0,
            beta_tmp: 1.0,
            near: 0.1,
            far: 100.0,
            min_step_fraction: 0.25,
            skip_budget: 64,
            max_steps: 4096,
            normalize: true,
            empty_space_skip: true,
            acc_cap_factor: 10.0,
        }
    }
}

impl TsdfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0
            && self.window % 2 == 1
            && self.step_factor > 0.0
            && self.step_factor < 1.0
            && self.near > 0.0
            && self.near < self.far
            && self.eta > 0.0
            && self.beta_tmp >= 0.0
            && self.min_step_fraction > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid TSDF params {self:?}")));
        }
        Ok(())
    }

    fn min_step(&self) -> f64 {
        self.tau * self.min_step_fraction
    }
}

/// Signed distance of `p` behind the surface seen by `cam`; `None` when the
/// point is behind the camera, projects outside the image or hits invalid depth.
pub fn signed_distance(p: &Point3, cam: &Camera, depth: &ScalarMap) -> Option<f64> {
    let q = cam.project(p)?;
    let d = depth.sample_bilinear(q.u, q.v)?;
    Some(q.z - d)
}

/// Confidence of the depth around `(u, v)` from its local variation.
/// Neighbours outside the image or invalid count as a full `tau^2`.
/// An invalid or out-of-bounds centre has weight 0.
pub fn fusion_weight(depth: &ScalarMap, u: f64, v: f64, params: &TsdfParams) -> f64 {
    if !(u >= 0.0 && v >= 0.0) {
        return 0.0;
    }
    let (x, y) = (u as usize, v as usize);
    if x >= depth.width || y >= depth.height {
        return 0.0;
    }
    pixel_fusion_weight(depth, x, y, params)
}

fn pixel_fusion_weight(depth: &ScalarMap, x: usize, y: usize, params: &TsdfParams) -> f64 {
    let center = depth.get(x, y);
    if !is_valid_depth(center) {
        return 0.0;
    }
    let tau2 = params.tau * params.tau;
    let c = center as f64;
    let term = |d: f32| {
        if is_valid_depth(d) {
            ((c - d as f64).powi(2)).min(tau2)
        } else {
            tau2
        }
    };
    let half = (params.window / 2) as i64;
    let mut nu = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
            let inside = xx >= 0 && yy >= 0 && (xx as usize) < depth.width && (yy as usize) < depth.height;
            let d = if inside {
                depth.get(xx as usize, yy as usize)
            } else {
                INVALID_DEPTH
            };
            nu += term(d);
        }
    }
    weight_from_variation(nu, params)
}

fn weight_from_variation(nu: f64, params: &TsdfParams) -> f64 {
    let n = (params.window * params.window) as f64;
    if nu == 0.0 {
        return 1.0;
    }
    (0.001 * (nu / n).powf(-0.5)).min(1.0)
}

/// Per-pixel [`fusion_weight`] of a whole depth map.
pub fn fusion_weight_map(depth: &ScalarMap, params: &TsdfParams) -> ScalarMap {
    let (w, h) = depth.dims();
    // Invalid depth as +inf clamps to tau^2 without a branch.
    let clean: Vec<f64> = depth
        .data
        .iter()
        .map(|&d| if is_valid_depth(d) { d as f64 } else { f64::INFINITY })
        .collect();
    let tau2 = params.tau * params.tau;
    let half = params.window / 2;
    let clean = &clean;
    let data: Vec<f32> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let interior = x >= half && y >= half && x + half < w && y + half < h;
                let c = clean[y * w + x];
                if !interior || c.is_infinite() {
                    return pixel_fusion_weight(depth, x, y, params) as f32;
                }
                let mut nu = 0.0;
                for yy in y - half..=y + half {
                    for &d in &clean[yy * w + x - half..=yy * w + x + half] {
                        nu += ((c - d) * (c - d)).min(tau2);
                    }
                }
                weight_from_variation(nu, params) as f32
            })
        })
        .collect();
    ScalarMap::from_vec(w, h, MapKind::Weight, data).expect("sized")
}

/// Minimum valid depth over power-of-two tiles. Level 0 holds, per pixel,
/// the minimum over its 3x3 neighbourhood, which covers every tap a bilinear
/// lookup inside that pixel can touch. Tiles without valid depth are +inf.
#[derive(Debug, Clone)]
struct MinPyramid {
    levels: Vec<(usize, usize, Vec<f32>)>,
}

impl MinPyramid {
    fn new(depth: &ScalarMap) -> Self {
        let (w, h) = depth.dims();
        let valid = |x: usize, y: usize| {
            let d = depth.get(x, y);
            if is_valid_depth(d) {
                d
            } else {
                f32::INFINITY
            }
        };
        let mut base = vec![f32::INFINITY; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::INFINITY;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        m = m.min(valid(xx, yy));
                    }
                }
                base[y * w + x] = m;
            }
        }
        let mut levels = vec![(w, h, base)];
        while levels.last().is_some_and(|l| l.0 > 1 || l.1 > 1) {
            let (pw, ph, prev) = levels.last().expect("non-empty");
            let (nw, nh) = (pw.div_ceil(2), ph.div_ceil(2));
            let mut next = vec![f32::INFINITY; nw * nh];
            for y in 0..*ph {
                for x in 0..*pw {
                    let c = &mut next[(y / 2) * nw + x / 2];
                    *c = c.min(prev[y * pw + x]);
                }
            }
            levels.push((nw, nh, next));
        }
        MinPyramid { levels }
    }

    /// How far target depth can advance from `z` along the camera-space line
    /// `a + z b` before `cam` could report a point within `tau` of (or
    /// behind) its surface.
    fn clear_run(&self, cam: &Camera, a: &Vector3<f64>, b: &Vector3<f64>, z: f64, tau: f64) -> f64 {
        let q = a + b * z;
        if q.z <= MIN_DEPTH {
            // Unseen until the line comes in front of the camera.
            return if b.z > 0.0 {
                (MIN_DEPTH - a.z) / b.z - z
            } else {
                f64::INFINITY
            };
        }
        // Projection leaves the camera's front half-space here.
        let pole = if b.z < 0.0 {
            (MIN_DEPTH - a.z) / b.z
        } else {
            f64::INFINITY
        };
        // Target depth at which pixel coordinate `c` is crossed along one axis.
        let cross = |c: f64, f: f64, cc: f64, ai: f64, bi: f64| {
            let den = f * bi - (c - cc) * b.z;
            let t = ((c - cc) * a.z - f * ai) / den;
            if den != 0.0 && t > z {
                t
            } else {
                f64::INFINITY
            }
        };
        let u = cam.fx * q.x / q.z + cam.cx;
        let v = cam.fy * q.y / q.z + cam.cy;
        let (w, h) = (cam.width as f64, cam.height as f64);
        if !(u >= 0.0 && v >= 0.0 && u < w && v < h) {
            // Unseen until the projection crosses an image border line.
            let enter = cross(0.0, cam.fx, cam.cx, a.x, b.x)
                .min(cross(w, cam.fx, cam.cx, a.x, b.x))
                .min(cross(0.0, cam.fy, cam.cy, a.y, b.y))
                .min(cross(h, cam.fy, cam.cy, a.y, b.y));
            return (enter.min(pole) - z).max(0.0);
        }
        // The projection moves monotonically until the pole, so only the
        // tile edge ahead of it can be crossed.
        let (du, dv) = (b.x * q.z - q.x * b.z, b.y * q.z - q.y * b.z);
        let edge = |lo: f64, hi: f64, dir: f64, f: f64, cc: f64, ai: f64, bi: f64| {
            if dir > 0.0 {
                cross(hi, f, cc, ai, bi)
            } else if dir < 0.0 {
                cross(lo, f, cc, ai, bi)
            } else {
                f64::INFINITY
            }
        };
        let mut best = 0.0f64;
        for (lvl, (lw, lh, data)) in self.levels.iter().enumerate() {
            let size = (1usize << lvl) as f64;
            let (i, j) = (
                ((u / size) as i32 as usize).min(lw - 1),
                ((v / size) as i32 as usize).min(lh - 1),
            );
            let m = data[j * lw + i] as f64;
            let limit = if m.is_infinite() {
                f64::INFINITY
            } else if b.z > 0.0 {
                (m - tau - a.z) / b.z
            } else if q.z < m - tau {
                f64::INFINITY
            } else {
                z
            };
            // Coarser tiles only lower the minimum.
            if limit - z <= best {
                break;
            }
            let (x0, x1) = (i as f64 * size, (i + 1) as f64 * size);
            let (y0, y1) = (j as f64 * size, (j + 1) as f64 * size);
            let exit = edge(x0, x1, du, cam.fx, cam.cx, a.x, b.x).min(edge(y0, y1, dv, cam.fy, cam.cy, a.y, b.y));
            best = best.max(limit.min(exit).min(pole) - z);
        }
        best.max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct TsdfView {
    pub camera: Camera,
    pub depth: ScalarMap,
    pub weights: ScalarMap,
    min_depth: f64,
    pyramid: MinPyramid,
    /// `depth` with invalid pixels as NaN.
    nan_depth: Vec<f32>,
}

impl TsdfView {
    pub fn new(camera: Camera, depth: ScalarMap, params: &TsdfParams) -> Result<Self> {
        check_dims("TSDF input depth", camera.dims(), depth.dims())?;
        let weights = fusion_weight_map(&depth, params);
        let min_depth = depth
            .data
            .iter()
            .filter(|d| is_valid_depth(**d))
            .fold(f64::INFINITY, |m, &d| m.min(d as f64));
        let pyramid = MinPyramid::new(&depth);
        let nan_depth = depth
            .data
            .iter()
            .map(|&d| if is_valid_depth(d) { d } else { f32::NAN })
            .collect();
        Ok(TsdfView {
            camera,
            depth,
            weights,
            min_depth,
            pyramid,
            nan_depth,
        })
    }

    /// Same value as `depth.sample_bilinear(u, v)`.
    #[inline]
    fn sample_depth(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = (u - 0.5, v - 0.5);
        if x >= 0.0 && y >= 0.0 {
            let (i0, j0) = (x as i32 as usize, y as i32 as usize);
            let w = self.depth.width;
            if i0 + 1 < w && j0 + 1 < self.depth.height {
                let (fx, fy) = (x - i0 as f64, y - j0 as f64);
                let at = j0 * w + i0;
                let (r0, r1) = (&self.nan_depth[at..at + 2], &self.nan_depth[at + w..at + w + 2]);
                let taps = [
                    (r0[0], (1.0 - fx) * (1.0 - fy)),
                    (r0[1], fx * (1.0 - fy)),
                    (r1[0], (1.0 - fx) * fy),
                    (r1[1], fx * fy),
                ];
                // An invalid tap with weight turns the sum into NaN.
                let mut acc = 0.0;
                for &(d, t) in &taps {
                    if t != 0.0 {
                        acc += t * d as f64;
                    }
                }
                return (!acc.is_nan()).then_some(acc);
            }
        }
        self.depth.sample_bilinear(u, v)
    }

    #[inline]
    fn weight_at(&self, u: f64, v: f64) -> f64 {
        let x = (u.max(0.0) as i32 as usize).min(self.weights.width - 1);
        let y = (v.max(0.0) as i32 as usize).min(self.weights.height - 1);
        self.weights.get(x, y) as f64
    }
}

/// Previous-frame depth fed back into the fusion.
#[derive(Debug, Clone)]
pub struct TemporalInput {
    /// Camera the current frame is rendered from.
    pub target: Camera,
    /// Camera `prev_depth` was rendered from.
    pub prev_camera: Camera,
    pub prev_depth: ScalarMap,
    /// Novel-view difference mask on the target grid.
    pub mask: ScalarMap,
    /// Accumulated fusion weight on the target grid.
    pub acc_weight: ScalarMap,
}

impl TemporalInput {
    fn aligned(&self) -> bool {
        self.target == self.prev_camera
    }

    /// `min(beta_tmp * acc * max(1 - M, 0), eta)` at a target pixel.
    pub fn weight(&self, x: usize, y: usize, params: &TsdfParams) -> f64 {
        let acc = self.acc_weight.get(x, y) as f64;
        let m = self.mask.get(x, y) as f64;
        (params.beta_tmp * acc * (1.0 - m).max(0.0)).min(params.eta)
    }
}

#[derive(Debug, Clone)]
pub struct TsdfContext {
    pub views: Vec<TsdfView>,
    pub temporal: Option<TemporalInput>,
    temporal_pyramid: Option<MinPyramid>,
}

impl TsdfContext {
    pub fn new(views: Vec<(Camera, ScalarMap)>, temporal: Option<TemporalInput>, params: &TsdfParams) -> Result<Self> {
        params.validate()?;
        if views.is_empty() {
            return Err(Error::NotEnoughViews {
                requested: 1,
                available: 0,
            });
        }
        if let Some(t) = &temporal {
            check_dims("previous novel depth", t.prev_camera.dims(), t.prev_depth.dims())?;
            check_dims("novel-view mask", t.target.dims(), t.mask.dims())?;
            check_dims("accumulated weight", t.target.dims(), t.acc_weight.dims())?;
            if t.acc_weight.data.iter().any(|&w| !(w >= 0.0)) {
                return Err(Error::InvalidParameter("accumulated weight must be >= 0".into()));
            }
        }
        let views = views
            .into_iter()
            .map(|(cam, depth)| TsdfView::new(cam, depth, params))
            .collect::<Result<_>>()?;
        let temporal_pyramid = temporal
            .as_ref()
            .filter(|t| !t.aligned())
            .map(|t| MinPyramid::new(&t.prev_depth));
        Ok(TsdfContext {
            views,
            temporal,
            temporal_pyramid,
        })
    }
}

/// Outcome of evaluating the fused field at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TsdfSample {
    /// No depth map sees the point.
    Unobserved,
    /// Every observation places the point more than `tau` in front of a surface.
    FreeSpace,
    /// Weighted fused distance (normalised unless disabled) and weight sum.
    Surface { s: f64, wsum: f64 },
}

impl TsdfSample {
    pub fn wsum(&self) -> f64 {
        match *self {
            TsdfSample::Surface { wsum, .. } => wsum,
            _ => 0.0,
        }
    }
}

#[derive(Default)]
struct Fusion {
    num: f64,
    wsum: f64,
    free: bool,
}

impl Fusion {
    /// Adds one observation; returns the weight it contributed.
    #[inline]
    fn add(&mut self, s: f64, weight: impl FnOnce() -> f64, tau: f64) -> f64 {
        if s < -tau {
            self.free = true;
            return 0.0;
        }
        let w = weight();
        self.num += w * s.clamp(-tau, tau);
        self.wsum += w;
        w
    }

    fn finish(self, normalize: bool) -> TsdfSample {
        if self.wsum > 0.0 {
            let s = if normalize { self.num / self.wsum } else { self.num };
            TsdfSample::Surface { s, wsum: self.wsum }
        } else if self.free {
            TsdfSample::FreeSpace
        } else {
            TsdfSample::Unobserved
        }
    }
}

/// Fused truncated signed distance at `p`. `pixel` is the target pixel whose
/// ray `p` lies on; it selects the temporal weight and, for an unmoved target,
/// the previous depth.
pub fn fused_tsdf(p: &Point3, ctx: &TsdfContext, pixel: (usize, usize), params: &TsdfParams) -> TsdfSample {
    let mut fusion = Fusion::default();
    for view in &ctx.views {
        let Some(q) = view.camera.project(p) else { continue };
        let Some(d) = view.depth.sample_bilinear(q.u, q.v) else {
            continue;
        };
        fusion.add(q.z - d, || view.weight_at(q.u, q.v), params.tau);
    }
    if let Some(t) = &ctx.temporal {
        let s = if t.aligned() {
            let d = t.prev_depth.get(pixel.0, pixel.1);
            is_valid_depth(d).then(|| t.target.to_camera(p).z - d as f64)
        } else {
            signed_distance(p, &t.prev_camera, &t.prev_depth)
        };
        if let Some(s) = s {
            fusion.add(s, || t.weight(pixel.0, pixel.1, params), params.tau);
        }
    }
    fusion.finish(params.normalize)
}

/// Novel-view difference mask: each input mask is splatted into the target
/// with its filtered depth and the per-pixel maximum is kept. Pixels no
/// splat covers are treated as dynamic (1.0).
pub fn splat_masks_to_target(
    masks: &[ScalarMap],
    src_cams: &[Camera],
    src_depths: &[ScalarMap],
    target: &Camera,
    splat: &SplatParams,
) -> Result<ScalarMap> {
    let gray: Vec<ColorImage> = masks
        .iter()
        .map(|m| ColorImage {
            width: m.width,
            height: m.height,
            data: m.data.iter().map(|&v| [v.clamp(0.0, 1.0); 3]).collect(),
        })
        .collect();
    let gray: Vec<&ColorImage> = gray.iter().collect();
    Ok(splat_views_with_masks(&gray, masks, src_cams, src_depths, target, splat)?.0)
}

/// Renders each view's colour into the target and splats its mask along
/// with it, returning the merged mask of [`splat_masks_to_target`] and the
/// colour renders of [`render_splats`].
pub fn splat_views_with_masks(
    colors: &[&ColorImage],
    masks: &[ScalarMap],
    src_cams: &[Camera],
    src_depths: &[ScalarMap],
    target: &Camera,
    splat: &SplatParams,
) -> Result<(ScalarMap, Vec<SplatRender>)> {
    let n = masks.len();
    if colors.len() != n || src_cams.len() != n || src_depths.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} colours, {n} masks, {} cameras, {} depths",
            colors.len(),
            src_cams.len(),
            src_depths.len()
        )));
    }
    let (w, h) = target.dims();
    let renders = colors
        .par_iter()
        .zip(masks)
        .zip(src_cams)
        .zip(src_depths)
        .enumerate()
        .map(|(k, (((color, mask), cam), depth))| {
            check_dims("difference mask vs camera", cam.dims(), mask.dims())?;
            let clamped = ScalarMap {
                data: mask.data.iter().map(|m| m.clamp(0.0, 1.0)).collect(),
                ..mask.clone()
            };
            let (set, values) = gaussians_with_scalar(color, &clamped, depth, cam, k, splat)?;
            render_splats_with_scalar(&set, &values, target, splat)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ScalarMap::filled(w, h, MapKind::Mask, 1.0);
    for i in 0..w * h {
        let covered = renders
            .iter()
            .filter_map(|(r, m)| {
                let a = r.alpha.data[i];
                (a as f64 > splat.min_alpha).then(|| (m.data[i] / a).min(1.0))
            })
            .fold(None, |m: Option<f32>, c| Some(m.map_or(c, |m| m.max(c))));
        if let Some(m) = covered {
            out.data[i] = m.clamp(0.0, 1.0);
        }
    }
    Ok((out, renders.into_iter().map(|(r, _)| r).collect()))
}

/// Fusion weights recorded at each ray's hit point.
#[derive(Debug, Clone, PartialEq)]
pub struct HitWeights {
    pub views: Vec<ScalarMap>,
    pub temporal: ScalarMap,
}

/// `acc = w_tmp(t-1) + sum_k w_k(t-1)` per pixel, capped at
/// `acc_cap_factor * eta`. Zero without a previous frame.
pub fn update_accumulated_weight(
    prev: Option<&HitWeights>,
    width: usize,
    height: usize,
    params: &TsdfParams,
) -> Result<ScalarMap> {
    let mut acc = ScalarMap::filled(width, height, MapKind::Weight, 0.0);
    let Some(prev) = prev else { return Ok(acc) };
    let cap = (params.acc_cap_factor * params.eta) as f32;
    for map in prev.views.iter().chain(std::iter::once(&prev.temporal)) {
        check_dims("previous hit weights", (width, height), map.dims())?;
        for (a, w) in acc.data.iter_mut().zip(&map.data) {
            *a += w;
        }
    }
    acc.data.iter_mut().for_each(|a| *a = a.min(cap));
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaymarchOutput {
    pub depth: ScalarMap,
    /// 1 where the ray found a surface.
    pub hitmask: ScalarMap,
    pub weights: HitWeights,
}

enum TemporalRay {
    None,
    /// Previous depth at this pixel (target unmoved), and its weight.
    Aligned {
        prev: Option<f64>,
        weight: f64,
    },
    Projected {
        a: Vector3<f64>,
        b: Vector3<f64>,
        weight: f64,
    },
}

/// One target ray expressed in every observer's camera space as `a + z b`,
/// where `z` is target depth.
struct RayFrame<'a> {
    ctx: &'a TsdfContext,
    params: &'a TsdfParams,
    lines: Vec<(Vector3<f64>, Vector3<f64>)>,
    temporal: TemporalRay,
}

impl<'a> RayFrame<'a> {
    fn new(ctx: &'a TsdfContext, target: &Camera, x: usize, y: usize, params: &'a TsdfParams) -> Self {
        let origin = target.center();
        let dir = target.depth_direction(x as f64 + 0.5, y as f64 + 0.5);
        let line = |cam: &Camera| (cam.to_camera(&origin), cam.rotation * dir);
        let lines = ctx.views.iter().map(|v| line(&v.camera)).collect();
        let temporal = match &ctx.temporal {
            None => TemporalRay::None,
            Some(t) => {
                let weight = t.weight(x, y, params);
                if t.aligned() {
                    let d = t.prev_depth.get(x, y);
                    TemporalRay::Aligned {
                        prev: is_valid_depth(d).then_some(d as f64),
                        weight,
                    }
                } else {
                    let (a, b) = line(&t.prev_camera);
                    TemporalRay::Projected { a, b, weight }
                }
            }
        };
        RayFrame {
            ctx,
            params,
            lines,
            temporal,
        }
    }

    /// Same quantity as [`fused_tsdf`] at target depth `z`. When `record`
    /// is given, each observer's contributed weight is written into it
    /// (views first, temporal last).
    fn eval(&self, z: f64, mut record: Option<&mut [f32]>) -> TsdfSample {
        let tau = self.params.tau;
        let mut fusion = Fusion::default();
        for (k, (view, (a, b))) in self.ctx.views.iter().zip(&self.lines).enumerate() {
            let q = a + b * z;
            if q.z <= MIN_DEPTH {
                continue;
            }
            let cam = &view.camera;
            let u = cam.fx * q.x / q.z + cam.cx;
            let v = cam.fy * q.y / q.z + cam.cy;
            let Some(d) = view.sample_depth(u, v) else {
                continue;
            };
            let w = fusion.add(q.z - d, || view.weight_at(u, v), tau);
            if let Some(r) = record.as_deref_mut() {
                r[k] = w as f32;
            }
        }
        let temporal = match &self.temporal {
            TemporalRay::None => None,
            TemporalRay::Aligned { prev, weight } => prev.map(|d| (z - d, *weight)),
            TemporalRay::Projected { a, b, weight } => {
                let t = self.ctx.temporal.as_ref().expect("temporal input");
                let q = a + b * z;
                t.prev_camera
                    .project_camera_space(&q)
                    .and_then(|p| t.prev_depth.sample_bilinear(p.u, p.v).map(|d| (q.z - d, *weight)))
            }
        };
        if let Some((s, weight)) = temporal {
            let w = fusion.add(s, || weight, tau);
            if let Some(r) = record {
                r[self.ctx.views.len()] = w as f32;
            }
        }
        fusion.finish(self.params.normalize)
    }

    /// Earliest target depth at which any observer can report a point
    /// within `tau` of (or behind) its surface.
    fn first_possible_observation(&self, target: &Camera, x: usize, y: usize) -> f64 {
        let tau = self.params.tau;
        let dir = target.depth_direction(x as f64 + 0.5, y as f64 + 0.5);
        let cos = 1.0 / dir.norm();
        let tc = target.center();
        let mut bound = f64::INFINITY;
        for view in &self.ctx.views {
            let dist = (view.camera.center() - tc).norm();
            bound = bound.min((view.min_depth - tau - dist) * cos);
        }
        match &self.temporal {
            TemporalRay::None => {}
            TemporalRay::Aligned { prev, .. } => {
                if let Some(d) = prev {
                    bound = bound.min(d - tau);
                }
            }
            TemporalRay::Projected { .. } => bound = f64::NEG_INFINITY,
        }
        bound - 1e-6
    }
}

impl RayFrame<'_> {
    /// Target depth that can be skipped from a free-space sample at `z`
    /// without passing any possible observation.
    fn clear_run(&self, z: f64) -> f64 {
        let tau = self.params.tau;
        let mut run = f64::INFINITY;
        for (view, (a, b)) in self.ctx.views.iter().zip(&self.lines) {
            run = run.min(view.pyramid.clear_run(&view.camera, a, b, z, tau));
            if run <= 0.0 {
                return 0.0;
            }
        }
        match &self.temporal {
            TemporalRay::None | TemporalRay::Aligned { prev: None, .. } => {}
            TemporalRay::Aligned { prev: Some(d), .. } => run = run.min(d - tau - z),
            TemporalRay::Projected { a, b, .. } => {
                let t = self.ctx.temporal.as_ref().expect("temporal input");
                let pyramid = self.ctx.temporal_pyramid.as_ref().expect("built for moved targets");
                run = run.min(pyramid.clear_run(&t.prev_camera, a, b, z, tau));
            }
        }
        run.max(0.0)
    }
}

/// "Distance ahead" used for marching: positive in front of the surface.
fn ahead(sample: &TsdfSample, tau: f64) -> Option<f64> {
    match *sample {
        TsdfSample::Unobserved => None,
        TsdfSample::FreeSpace => Some(tau),
        TsdfSample::Surface { s, .. } => Some(-s),
    }
}

fn march_ray(frame: &RayFrame, target: &Camera, x: usize, y: usize, record: &mut [f32]) -> Option<f64> {
    let p = frame.params;
    let mut z = p.near;
    if p.empty_space_skip {
        z = z.max(frame.first_possible_observation(target, x, y));
    }
    let mut prev: Option<(f64, f64)> = None;
    let mut unobserved = 0usize;
    for _ in 0..p.max_steps {
        if z > p.far {
            return None;
        }
        let sample = frame.eval(z, None);
        let step_len = match ahead(&sample, p.tau) {
            None => {
                // A sign change across unobserved space is not a surface.
                prev = None;
                unobserved += 1;
                if unobserved > p.skip_budget {
                    return None;
                }
                p.tau
            }
            Some(d) => {
                unobserved = 0;
                if d <= 0.0 {
                    if let Some((z_front, d_front)) = prev {
                        if d_front > 0.0 {
                            let hit = bisect(frame, z_front, z, p.bisection_steps);
                            frame.eval(hit, Some(record));
                            return Some(hit);
                        }
                    }
                }
                prev = Some((z, d));
                if p.empty_space_skip && sample == TsdfSample::FreeSpace {
                    d.max(frame.clear_run(z) / p.step_factor)
                } else {
                    d.abs()
                }
            }
        };
        z += p.step_factor * step_len.max(p.min_step());
    }
    None
}

fn bisect(frame: &RayFrame, mut front: f64, mut back: f64, steps: usize) -> f64 {
    for _ in 0..steps {
        let mid = 0.5 * (front + back);
        match ahead(&frame.eval(mid, None), frame.params.tau) {
            Some(d) if d <= 0.0 => back = mid,
            _ => front = mid,
        }
    }
    0.5 * (front + back)
}

/// Novel-view depth by marching every target pixel through the fused field.
pub fn raymarch_depth(ctx: &TsdfContext, target: &Camera, params: &TsdfParams) -> Result<RaymarchOutput> {
    params.validate()?;
    if let Some(t) = &ctx.temporal {
        if t.target != *target {
            return Err(Error::InvalidParameter(
                "temporal input was prepared for a different target".into(),
            ));
        }
    }
    let (w, h) = target.dims();
    let n_obs = ctx.views.len() + 1;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut depth = vec![INVALID_DEPTH; w];
            let mut weights = vec![0.0f32; w * n_obs];
            for x in 0..w {
                let frame = RayFrame::new(ctx, target, x, y, params);
                if let Some(z) = march_ray(&frame, target, x, y, &mut weights[x * n_obs..(x + 1) * n_obs]) {
                    depth[x] = z as f32;
                }
            }
            (depth, weights)
        })
        .collect();

    let mut depth = ScalarMap::filled(w, h, MapKind::Depth, INVALID_DEPTH);
    let mut hitmask = ScalarMap::filled(w, h, MapKind::Mask, 0.0);
    let mut views = vec![ScalarMap::filled(w, h, MapKind::Weight, 0.0); ctx.views.len()];
    let mut temporal = ScalarMap::filled(w, h, MapKind::Weight, 0.0);
    for (y, (drow, wrow)) in rows.into_iter().enumerate() {
        for x in 0..w {
            let i = y * w + x;
            depth.data[i] = drow[x];
            hitmask.data[i] = if is_valid_depth(drow[x]) { 1.0 } else { 0.0 };
            let rec = &wrow[x * n_obs..(x + 1) * n_obs];
            for (k, map) in views.iter_mut().enumerate() {
                map.data[i] = rec[k];
            }
            temporal.data[i] = rec[n_obs - 1];
        }
    }
    Ok(RaymarchOutput {
        depth,
        hitmask,
        weights: HitWeights { views, temporal },
    })
}
