//! Geometry-guided blending of forward-rendered views.
//!
//! Each view's render is weighted per pixel, the weighted foreground is
//! composited over a background image with a background weight. The
//! foreground is the normalised weighted mean
//! `sum_k I_k a_k w_k / sum_k a_k w_k`.
//!
//! Weights come from a [`WeightProvider`]. The heuristic provider favours
//! views whose rendered depth agrees with the TSDF depth and whose rays are
//! close to the target ray; it consumes the same per-pixel features a learned
//! blender would (see [`BlendFeatures::to_tensor`]).

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::Camera;
use crate::raster::{check_dims, is_valid_depth, normals_from_depth, ColorImage, MapKind, Rgb, ScalarMap};
use crate::splat::SplatRender;
use crate::{Error, Point3, Result};

/// Foreground denominators below this mark a hole.
pub const HOLE_EPS: f64 = 1e-6;

/// Per-view inputs to the blender on the target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    /// Straight (un-premultiplied) colour.
    pub color: ColorImage,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
    /// Direction from the surface to this view's camera, dotted with the TSDF normal.
    pub normal_dot: ScalarMap,
    /// This view's ray through the surface point, dotted with the target ray.
    pub ray_dot: ScalarMap,
    /// Distance between this camera's centre and the target's.
    pub camera_distance: f64,
    /// Dot of the two forward axes.
    pub axis_dot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendFeatures {
    pub width: usize,
    pub height: usize,
    pub views: Vec<ViewFeatures>,
    pub tsdf_depth: ScalarMap,
}

impl BlendFeatures {
    pub fn k(&self) -> usize {
        self.views.len()
    }

    /// Channel-major `(9K + 1) x H x W` tensor: colours (3K), depths (K),
    /// alphas (K), TSDF depth (1), normal dots (K), ray dots (K), camera
    /// distances (K), axis dots (K).
    pub fn to_tensor(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let k = self.k();
        let mut out = Vec::with_capacity((9 * k + 1) * n);
        for v in &self.views {
            for c in 0..3 {
                out.extend(v.color.data.iter().map(|p| p[c]));
            }
        }
        for v in &self.views {
            out.extend_from_slice(&v.depth.data);
        }
        for v in &self.views {
            out.extend_from_slice(&v.alpha.data);
        }
        out.extend_from_slice(&self.tsdf_depth.data);
        for v in &self.views {
            out.extend_from_slice(&v.normal_dot.data);
        }
        for v in &self.views {
            out.extend_from_slice(&v.ray_dot.data);
        }
        for v in &self.views {
            out.extend(std::iter::repeat_n(v.camera_distance as f32, n));
        }
        for v in &self.views {
            out.extend(std::iter::repeat_n(v.axis_dot as f32, n));
        }
        out
    }
}

/// Per-pixel point the features are measured at: the TSDF surface, or this
/// view's own rendered surface where the TSDF has no depth.
fn surface_point(target: &Camera, x: usize, y: usize, tsdf: f32, own: f32) -> Option<Point3> {
    let d = if is_valid_depth(tsdf) {
        tsdf
    } else if is_valid_depth(own) {
        own
    } else {
        return None;
    };
    Some(
        target
            .unproject(x as f64 + 0.5, y as f64 + 0.5, d as f64)
            .expect("valid depth"),
    )
}

pub fn compute_features(
    renders: &[SplatRender],
    target: &Camera,
    tsdf_depth: &ScalarMap,
    src_cams: &[Camera],
) -> Result<BlendFeatures> {
    if renders.len() != src_cams.len() {
        return Err(Error::InvalidParameter(format!(
            "{} renders for {} cameras",
            renders.len(),
            src_cams.len()
        )));
    }
    let (w, h) = target.dims();
    check_dims("TSDF depth", (w, h), tsdf_depth.dims())?;
    let normals = normals_from_depth(tsdf_depth, target)?;
    let tc = target.center();
    let views = renders
        .iter()
        .zip(src_cams)
        .map(|(r, cam)| {
            check_dims("view render", (w, h), r.alpha.dims())?;
            let ck = cam.center();
            let color = ColorImage {
                width: w,
                height: h,
                data: (0..w * h)
                    .map(|i| r.straight_color(i, 0.0).unwrap_or([0.0; 3]))
                    .collect(),
            };
            let mut normal_dot = ScalarMap::filled(w, h, MapKind::Weight, 0.0);
            let mut ray_dot = ScalarMap::filled(w, h, MapKind::Weight, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let Some(p) = surface_point(target, x, y, tsdf_depth.data[i], r.depth.data[i]) else {
                        continue;
                    };
                    let (Some(to_view), Some(target_ray)) =
                        ((ck - p).try_normalize(1e-12), (p - tc).try_normalize(1e-12))
                    else {
                        continue;
                    };
                    if let Some(n) = normals.data[i] {
                        normal_dot.data[i] = to_view.dot(&n).clamp(-1.0, 1.0) as f32;
                    }
                    ray_dot.data[i] = (-to_view).dot(&target_ray).clamp(-1.0, 1.0) as f32;
                }
            }
            Ok(ViewFeatures {
                color,
                depth: r.depth.clone(),
                alpha: r.alpha.clone(),
                normal_dot,
                ray_dot,
                camera_distance: (ck - tc).norm(),
                axis_dot: cam.forward().dot(&target.forward()).clamp(-1.0, 1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlendFeatures {
        width: w,
        height: h,
        views,
        tsdf_depth: tsdf_depth.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub views: Vec<ScalarMap>,
    pub background: ScalarMap,
    pub background_image: ColorImage,
}

/// Source of per-view blending weights.
pub trait WeightProvider {
    /// Raw non-negative per-view weights; normalisation and the background
    /// terms are derived by [`finish_weights`].
    fn view_weights(&self, feat: &BlendFeatures) -> Vec<ScalarMap>;

    fn weights(&self, feat: &BlendFeatures) -> BlendWeights {
        finish_weights(feat, self.view_weights(feat))
    }
}

/// Every covering view counts the same.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

impl WeightProvider for Uniform {
    fn view_weights(&self, feat: &BlendFeatures) -> Vec<ScalarMap> {
        feat.views
            .iter()
            .map(|_| ScalarMap::filled(feat.width, feat.height, MapKind::Weight, 1.0))
            .collect()
    }
}

/// Inverse distance between camera centres, constant over the image.
#[derive(Debug, Clone, Copy, Default)]
pub struct CameraDistance;

impl WeightProvider for CameraDistance {
    fn view_weights(&self, feat: &BlendFeatures) -> Vec<ScalarMap> {
        feat.views
            .iter()
            .map(|v| {
                ScalarMap::filled(
                    feat.width,
                    feat.height,
                    MapKind::Weight,
                    (1.0 / (v.camera_distance + 1e-3)) as f32,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Heuristic {
    /// Depth disagreement scale, meters.
    pub sigma_d: f64,
    /// Exponent on the ray agreement term.
    pub gamma: f64,
}

impl Default for Heuristic {
    fn default() -> Self {
        Heuristic {
            sigma_d: 0.04,
            gamma: 2.0,
        }
    }
}

impl WeightProvider for Heuristic {
    fn view_weights(&self, feat: &BlendFeatures) -> Vec<ScalarMap> {
        feat.views
            .iter()
            .map(|v| {
                let data = (0..feat.width * feat.height)
                    .into_par_iter()
                    .map(|i| {
                        let (dk, d) = (v.depth.data[i], feat.tsdf_depth.data[i]);
                        let depth_term = if is_valid_depth(dk) && is_valid_depth(d) {
                            (-((dk - d).abs() as f64) / self.sigma_d).exp()
                        } else {
                            1.0
                        };
                        let angle = (v.ray_dot.data[i] as f64).max(0.0).powf(self.gamma);
                        (depth_term * angle * v.alpha.data[i] as f64) as f32
                    })
                    .collect();
                ScalarMap::from_vec(feat.width, feat.height, MapKind::Weight, data).expect("sized")
            })
            .collect()
    }
}

/// Heuristic weights with explicit parameters.
pub fn heuristic_weights(feat: &BlendFeatures, sigma_d: f64, gamma: f64) -> Result<BlendWeights> {
    if !(sigma_d > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_d must be > 0, got {sigma_d}")));
    }
    Ok(Heuristic { sigma_d, gamma }.weights(feat))
}

/// Scales raw weights so the largest view weight at each pixel is 1, then
/// derives the background weight and the background image.
pub fn finish_weights(feat: &BlendFeatures, mut views: Vec<ScalarMap>) -> BlendWeights {
    let (w, h) = (feat.width, feat.height);
    let mut background = ScalarMap::filled(w, h, MapKind::Weight, 1.0);
    for i in 0..w * h {
        let max = views.iter().map(|m| m.data[i]).fold(0.0f32, f32::max);
        let mut covered = 0.0f64;
        for (m, v) in views.iter_mut().zip(&feat.views) {
            m.data[i] = if max > 0.0 { m.data[i].max(0.0) / max } else { 0.0 };
            covered += v.alpha.data[i] as f64 * m.data[i] as f64;
        }
        background.data[i] = (1.0 - covered).clamp(0.0, 1.0) as f32;
    }
    let mut weights = BlendWeights {
        views,
        background,
        background_image: ColorImage::filled(w, h, [0.0; 3]),
    };
    let fg = blend_foreground(feat, &weights);
    weights.background_image = nearest_fill(&fg);
    weights
}

#[derive(Debug, Clone, PartialEq)]
pub struct Foreground {
    pub color: ColorImage,
    /// True where no view contributes.
    pub hole: Vec<bool>,
}

pub fn blend_foreground(feat: &BlendFeatures, weights: &BlendWeights) -> Foreground {
    let n = feat.width * feat.height;
    let (data, hole): (Vec<Rgb>, Vec<bool>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut num = [0.0f64; 3];
            let mut den = 0.0f64;
            for (v, w) in feat.views.iter().zip(&weights.views) {
                let aw = v.alpha.data[i] as f64 * w.data[i] as f64;
                let c = v.color.data[i];
                for ch in 0..3 {
                    num[ch] += c[ch] as f64 * aw;
                }
                den += aw;
            }
            if den < HOLE_EPS {
                ([0.0; 3], true)
            } else {
                (num.map(|x| (x / den).clamp(0.0, 1.0) as f32), false)
            }
        })
        .unzip();
    Foreground {
        color: ColorImage {
            width: feat.width,
            height: feat.height,
            data,
        },
        hole,
    }
}

/// Fills holes with the colour of the nearest non-hole pixel (breadth-first,
/// 4-connected, seeds in scan order). Black if nothing is covered.
pub fn nearest_fill(fg: &Foreground) -> ColorImage {
    let (w, h) = fg.color.dims();
    let mut out = fg.color.clone();
    let mut seen: Vec<bool> = fg.hole.iter().map(|&hole| !hole).collect();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| seen[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let neighbours = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for j in neighbours.into_iter().flatten() {
            if !seen[j] {
                seen[j] = true;
                out.data[j] = out.data[i];
                queue.push_back(j);
            }
        }
    }
    out
}

/// `(1 - w_bg) fg + w_bg bg`, with holes taken from the background image.
pub fn composite_background(fg: &Foreground, weights: &BlendWeights) -> ColorImage {
    let bg = &weights.background_image;
    let data = fg
        .color
        .data
        .iter()
        .zip(&fg.hole)
        .zip(bg.data.iter().zip(&weights.background.data))
        .map(|((f, &hole), (b, &wb))| {
            if hole {
                *b
            } else {
                let wb = wb.clamp(0.0, 1.0);
                [0, 1, 2].map(|c| ((1.0 - wb) * f[c] + wb * b[c]).clamp(0.0, 1.0))
            }
        })
        .collect();
    ColorImage {
        width: fg.color.width,
        height: fg.color.height,
        data,
    }
}

/// Mean absolute difference, in meters, between the TSDF depth and the depth
/// blended with the view weights, over pixels where both exist.
pub fn depth_blend_residual(weights: &BlendWeights, feat: &BlendFeatures) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..feat.width * feat.height {
        let target = feat.tsdf_depth.data[i];
        if !is_valid_depth(target) {
            continue;
        }
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (v, w) in feat.views.iter().zip(&weights.views) {
            if !is_valid_depth(v.depth.data[i]) {
                continue;
            }
            let aw = v.alpha.data[i] as f64 * w.data[i] as f64;
            num += v.depth.data[i] as f64 * aw;
            den += aw;
        }
        if den >= HOLE_EPS {
            sum += (target as f64 - num / den).abs();
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}
