//! Forward warping with pixel-sized isotropic Gaussians.
//!
//! Every valid source pixel becomes one fully opaque Gaussian whose 1-sigma
//! footprint covers half a source pixel on each side. Rendering sorts splats
//! front to back and alpha-composites their screen-space footprints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::Camera;
use crate::raster::{check_dims, is_valid_depth, ColorImage, MapKind, Rgb, ScalarMap, INVALID_DEPTH};
use crate::{Point3, Result};

const BAND_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatParams {
    /// World sigma in units of the source pixel footprint at the splat depth.
    pub pixel_scale: f64,
    /// Footprint truncation in screen-space sigmas.
    pub cutoff_sigmas: f64,
    /// Minimum footprint radius in target pixels.
    pub min_radius_px: f64,
    /// Stop compositing a pixel once its transmittance drops below this.
    pub min_transmittance: f64,
    /// Depth is reported only where accumulated alpha exceeds this.
    pub min_alpha: f64,
}

impl Default for SplatParams {
    fn default() -> Self {
        SplatParams {
            pixel_scale: 0.5,
            cutoff_sigmas: 3.0,
            min_radius_px: 1.0,
            min_transmittance: 1e-3,
            min_alpha: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub center: Point3,
    /// Isotropic world-space sigma, meters.
    pub radius: f64,
    pub color: Rgb,
    pub opacity: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatSet {
    pub view_id: usize,
    pub splats: Vec<Splat>,
}

/// Forward-rendered colour (premultiplied by coverage), accumulated alpha
/// and alpha-normalised depth of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatRender {
    pub color: ColorImage,
    pub alpha: ScalarMap,
    pub depth: ScalarMap,
}

impl SplatRender {
    /// Colour divided by alpha where covered, black elsewhere.
    pub fn straight_color(&self, idx: usize, min_alpha: f64) -> Option<Rgb> {
        let a = self.alpha.data[idx];
        (a as f64 > min_alpha).then(|| self.color.data[idx].map(|c| (c / a).min(1.0)))
    }
}

/// One Gaussian per valid source pixel.
pub fn gaussians_from_view(
    img: &ColorImage,
    depth: &ScalarMap,
    cam: &Camera,
    view_id: usize,
    params: &SplatParams,
) -> Result<SplatSet> {
    check_dims("colour vs camera", cam.dims(), img.dims())?;
    check_dims("depth vs camera", cam.dims(), depth.dims())?;
    let focal = 0.5 * (cam.fx + cam.fy);
    let center = cam.center();
    let mut splats = Vec::with_capacity(depth.data.len());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = depth.get(x, y);
            if !is_valid_depth(d) {
                continue;
            }
            let d = d as f64;
            let dir = cam.depth_direction(x as f64 + 0.5, y as f64 + 0.5);
            splats.push(Splat {
                center: center + dir * d,
                radius: d / focal * params.pixel_scale,
                color: img.get(x, y),
                opacity: 1.0,
            });
        }
    }
    Ok(SplatSet { view_id, splats })
}

/// [`gaussians_from_view`] plus `scalar` sampled at each splat's source
/// pixel, in splat order.
pub fn gaussians_with_scalar(
    img: &ColorImage,
    scalar: &ScalarMap,
    depth: &ScalarMap,
    cam: &Camera,
    view_id: usize,
    params: &SplatParams,
) -> Result<(SplatSet, Vec<f32>)> {
    check_dims("scalar vs camera", cam.dims(), scalar.dims())?;
    let set = gaussians_from_view(img, depth, cam, view_id, params)?;
    let values: Vec<f32> = depth
        .data
        .iter()
        .zip(&scalar.data)
        .filter(|(d, _)| is_valid_depth(**d))
        .map(|(_, &v)| v)
        .collect();
    debug_assert_eq!(values.len(), set.splats.len());
    Ok((set, values))
}

#[derive(Clone, Copy)]
struct Projected {
    z: f64,
    u: f64,
    v: f64,
    inv_two_sigma2: f64,
    radius: f64,
    color: Rgb,
    scalar: f32,
    opacity: f64,
}

fn sort_key(a: &(Projected, usize), b: &(Projected, usize)) -> std::cmp::Ordering {
    let (pa, pb) = (&a.0, &b.0);
    pa.z.total_cmp(&pb.z)
        .then(pa.u.total_cmp(&pb.u))
        .then(pa.v.total_cmp(&pb.v))
        .then_with(|| {
            let bits = |c: &Rgb| c.map(f32::to_bits);
            bits(&pa.color).cmp(&bits(&pb.color))
        })
        .then(a.1.cmp(&b.1))
}

#[inline]
fn pixel_span(c: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    // Pixels whose centre lies within [c - r, c + r].
    let lo = (c - r - 0.5).ceil().max(0.0);
    let hi = (c + r - 0.5).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Render a splat set into `target`.
pub fn render_splats(set: &SplatSet, target: &Camera, params: &SplatParams) -> SplatRender {
    composite(set, None, target, params).0
}

/// [`render_splats`] with one scalar per splat composited alongside the
/// colour. The scalar map is premultiplied by coverage like the colour.
pub fn render_splats_with_scalar(
    set: &SplatSet,
    values: &[f32],
    target: &Camera,
    params: &SplatParams,
) -> Result<(SplatRender, ScalarMap)> {
    if values.len() != set.splats.len() {
        return Err(crate::Error::InvalidParameter(format!(
            "{} scalars for {} splats",
            values.len(),
            set.splats.len()
        )));
    }
    let (render, scalar) = composite(set, Some(values), target, params);
    Ok((render, scalar.expect("requested")))
}

fn composite(
    set: &SplatSet,
    values: Option<&[f32]>,
    target: &Camera,
    params: &SplatParams,
) -> (SplatRender, Option<ScalarMap>) {
    let (w, h) = target.dims();
    let focal = 0.5 * (target.fx + target.fy);

    let mut projected: Vec<(Projected, usize)> = set
        .splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let p = target.project(&s.center)?;
            let sigma = s.radius * focal / p.z;
            let radius = (params.cutoff_sigmas * sigma).max(params.min_radius_px);
            pixel_span(p.u, radius, w)?;
            pixel_span(p.v, radius, h)?;
            Some((
                Projected {
                    z: p.z,
                    u: p.u,
                    v: p.v,
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    radius,
                    color: s.color,
                    scalar: values.map_or(0.0, |v| v[i]),
                    opacity: s.opacity as f64,
                },
                i,
            ))
        })
        .collect();
    projected.par_sort_unstable_by(sort_key);

    let bands = h.div_ceil(BAND_ROWS);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); bands];
    for (k, (p, _)) in projected.iter().enumerate() {
        let (y0, y1) = pixel_span(p.v, p.radius, h).expect("culled above");
        for bin in &mut bins[y0 / BAND_ROWS..=y1 / BAND_ROWS] {
            bin.push(k as u32);
        }
    }

    let band_out: Vec<_> = bins
        .par_iter()
        .enumerate()
        .map(|(b, bin)| {
            let row0 = b * BAND_ROWS;
            let rows = BAND_ROWS.min(h - row0);
            let n = rows * w;
            let mut trans = vec![1.0f64; n];
            let mut color = vec![[0.0f64; 3]; n];
            let mut depth = vec![0.0f64; n];
            let mut scalar = vec![0.0f64; if values.is_some() { n } else { 0 }];
            for &k in bin {
                let p = &projected[k as usize].0;
                let (y0, y1) = pixel_span(p.v, p.radius, h).expect("culled above");
                let (x0, x1) = pixel_span(p.u, p.radius, w).expect("culled above");
                let r2 = p.radius * p.radius;
                for y in y0.max(row0)..=y1.min(row0 + rows - 1) {
                    let dy = y as f64 + 0.5 - p.v;
                    for x in x0..=x1 {
                        let dx = x as f64 + 0.5 - p.u;
                        let d2 = dx * dx + dy * dy;
                        if d2 > r2 {
                            continue;
                        }
                        let i = (y - row0) * w + x;
                        let t = trans[i];
                        if t < params.min_transmittance {
                            continue;
                        }
                        let g = p.opacity * (-d2 * p.inv_two_sigma2).exp();
                        let contrib = t * g;
                        for c in 0..3 {
                            color[i][c] += contrib * p.color[c] as f64;
                        }
                        depth[i] += contrib * p.z;
                        if let Some(sc) = scalar.get_mut(i) {
                            *sc += contrib * p.scalar as f64;
                        }
                        trans[i] = t * (1.0 - g);
                    }
                }
            }
            (trans, color, depth, scalar)
        })
        .collect();

    let mut out_color = Vec::with_capacity(w * h);
    let mut out_alpha = Vec::with_capacity(w * h);
    let mut out_depth = Vec::with_capacity(w * h);
    let mut out_scalar = Vec::with_capacity(if values.is_some() { w * h } else { 0 });
    for (trans, color, depth, scalar) in band_out {
        out_scalar.extend(scalar.iter().map(|&v| v as f32));
        for i in 0..trans.len() {
            let alpha = (1.0 - trans[i]).clamp(0.0, 1.0);
            out_alpha.push(alpha as f32);
            out_color.push(color[i].map(|c| c as f32));
            out_depth.push(if alpha > params.min_alpha {
                (depth[i] / alpha) as f32
            } else {
                INVALID_DEPTH
            });
        }
    }
    let render = SplatRender {
        color: ColorImage::from_vec(w, h, out_color).expect("sized"),
        alpha: ScalarMap::from_vec(w, h, MapKind::Alpha, out_alpha).expect("sized"),
        depth: ScalarMap::from_vec(w, h, MapKind::Depth, out_depth).expect("sized"),
    };
    let scalar = values.map(|_| ScalarMap::from_vec(w, h, MapKind::Weight, out_scalar).expect("sized"));
    (render, scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    fn smooth(w: usize, h: usize) -> ColorImage {
        ColorImage::from_fn(w, h, |x, y| {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            [
                0.5 + 0.3 * (6.0 * u).sin(),
                0.5 + 0.3 * (5.0 * v).cos(),
                0.25 + 0.5 * u * v,
            ]
        })
    }

    #[test]
    fn one_pixel_footprint_sigma() {
        let cam = Camera::identity(500.0, 4, 4);
        let set = gaussians_from_view(
            &ColorImage::filled(4, 4, [0.2; 3]),
            &ScalarMap::filled(4, 4, MapKind::Depth, 2.0),
            &cam,
            0,
            &SplatParams::default(),
        )
        .unwrap();
        assert_eq!(set.splats.len(), 16);
        for s in &set.splats {
            assert!((s.radius - 0.002).abs() < 1e-15);
            assert_eq!(s.opacity, 1.0);
            assert_eq!(s.color, [0.2; 3]);
        }
        // Analytic check: sigma * f / z is half a pixel at the source depth.
        let p = cam.project(&set.splats[5].center).unwrap();
        assert!((set.splats[5].radius * 500.0 / p.z - 0.5).abs() < 1e-12);
        assert!((p.u - 1.5).abs() < 1e-12 && (p.v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_depth_makes_no_splat() {
        let cam = Camera::identity(100.0, 3, 1);
        let depth = ScalarMap::from_vec(3, 1, MapKind::Depth, vec![1.0, INVALID_DEPTH, 2.0]).unwrap();
        let set = gaussians_from_view(
            &ColorImage::filled(3, 1, [0.0; 3]),
            &depth,
            &cam,
            3,
            &SplatParams::default(),
        )
        .unwrap();
        assert_eq!(set.splats.len(), 2);
        assert_eq!(set.view_id, 3);
    }

    #[test]
    fn full_frame_splat_count() {
        let cam = Camera::identity(500.0, 640, 360);
        let set = gaussians_from_view(
            &ColorImage::filled(640, 360, [0.5; 3]),
            &ScalarMap::filled(640, 360, MapKind::Depth, 3.0),
            &cam,
            0,
            &SplatParams::default(),
        )
        .unwrap();
        assert_eq!(set.splats.len(), 230_400);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cam = Camera::identity(100.0, 4, 4);
        let r = gaussians_from_view(
            &ColorImage::filled(4, 3, [0.0; 3]),
            &ScalarMap::filled(4, 4, MapKind::Depth, 1.0),
            &cam,
            0,
            &SplatParams::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn identity_reprojection_is_faithful() {
        let (w, h) = (96, 64);
        let cam = Camera::identity(120.0, w, h);
        let img = smooth(w, h);
        let depth = ScalarMap::from_fn(w, h, MapKind::Depth, |x, y| 2.0 + 0.002 * x as f32 + 0.001 * y as f32);
        let params = SplatParams::default();
        let r = render_splats(
            &gaussians_from_view(&img, &depth, &cam, 0, &params).unwrap(),
            &cam,
            &params,
        );
        let mut se = 0.0;
        for i in 0..w * h {
            assert!(r.alpha.data[i] > 0.99);
            for c in 0..3 {
                let e = (r.color.data[i][c] - img.data[i][c]) as f64;
                assert!(e.abs() < 2.0 / 255.0, "pixel {i} channel {c}: {e}");
                se += e * e;
            }
            assert!((r.depth.data[i] - depth.data[i]).abs() < 5e-3);
        }
        let psnr = 10.0 * (1.0 / (se / (3 * w * h) as f64)).log10();
        assert!(psnr > 40.0, "{psnr}");
    }

    fn single(center: Point3, color: Rgb, radius: f64) -> Splat {
        Splat {
            center,
            radius,
            color,
            opacity: 1.0,
        }
    }

    #[test]
    fn isolated_splat_is_radially_monotone() {
        let cam = Camera::identity(100.0, 21, 21);
        // sigma of 2 px at z = 1.
        let set = SplatSet {
            view_id: 0,
            splats: vec![single(Point3::new(0.0, 0.0, 1.0), [1.0; 3], 0.02)],
        };
        let r = render_splats(&set, &cam, &SplatParams::default());
        // Projects onto the centre of pixel (10, 10).
        let a = &r.alpha;
        let peak = a.get(10, 10);
        assert!(a.data.iter().all(|&x| x <= peak));
        for d in 1..6 {
            assert!(a.get(10 + d, 10) < a.get(10 + d - 1, 10));
            assert!(a.get(10, 10 - d) < a.get(10, 10 - d + 1));
        }
        assert!((a.get(12, 10) - a.get(8, 10)).abs() < 1e-6);
    }

    #[test]
    fn near_splat_occludes_far() {
        let cam = Camera::identity(100.0, 11, 11);
        let c = Point3::new(0.0, 0.0, 1.0);
        let far = Point3::new(0.0, 0.0, 2.0);
        let set = SplatSet {
            view_id: 0,
            splats: vec![single(far, [0.0, 0.0, 1.0], 0.01), single(c, [1.0, 0.0, 0.0], 0.005)],
        };
        // Sample the pixel whose centre is at the projection (5.5, 5.5).
        let cam = Camera {
            cx: 5.5,
            cy: 5.5,
            ..cam
        };
        let r = render_splats(&set, &cam, &SplatParams::default());
        let px = r.color.get(5, 5);
        assert_eq!(px, [1.0, 0.0, 0.0]);
        assert!((r.depth.get(5, 5) - 1.0).abs() < 1e-6);
        assert!(px[2] < 1e-3);
    }

    #[test]
    fn empty_set_renders_nothing() {
        let cam = Camera::identity(100.0, 8, 8);
        let r = render_splats(
            &SplatSet {
                view_id: 0,
                splats: vec![],
            },
            &cam,
            &SplatParams::default(),
        );
        assert!(r.alpha.data.iter().all(|&a| a == 0.0));
        assert!(r.depth.data.iter().all(|&d| d == INVALID_DEPTH));
    }

    fn random_set(seed: u64, n: usize) -> SplatSet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SplatSet {
            view_id: 0,
            splats: (0..n)
                .map(|_| {
                    single(
                        Point3::new(
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(1.5..2.5),
                        ),
                        [rng.gen(), rng.gen(), rng.gen()],
                        rng.gen_range(0.002..0.02),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn rigid_motion_leaves_render_unchanged() {
        let cam = Camera::identity(80.0, 40, 30);
        let set = random_set(11, 300);
        let params = SplatParams::default();
        let a = render_splats(&set, &cam, &params);
        let rot = Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let shift = Vector3::new(1.0, -2.0, 0.5);
        let moved = SplatSet {
            view_id: 0,
            splats: set
                .splats
                .iter()
                .map(|s| Splat {
                    center: rot * s.center + shift,
                    ..*s
                })
                .collect(),
        };
        // World-to-camera of the moved camera: R' = R rot^T, t' = t - R' shift.
        let r2 = cam.rotation * rot.transpose();
        let cam2 = Camera {
            rotation: r2,
            translation: cam.translation - r2 * shift,
            ..cam.clone()
        };
        let b = render_splats(&moved, &cam2, &params);
        for i in 0..a.alpha.data.len() {
            assert!((a.alpha.data[i] - b.alpha.data[i]).abs() < 1e-5);
            for c in 0..3 {
                assert!((a.color.data[i][c] - b.color.data[i][c]).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn render_is_permutation_invariant_and_bounded(seed in any::<u64>(), n in 1usize..200) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cam = Camera::identity(60.0, 24, 20);
            let set = random_set(seed, n);
            let mut shuffled = set.clone();
            shuffled.splats.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
            let params = SplatParams::default();
            let a = render_splats(&set, &cam, &params);
            let b = render_splats(&shuffled, &cam, &params);
            prop_assert_eq!(&a, &b);
            prop_assert!(a.alpha.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(a.color.data.iter().all(|c| c.iter().all(|&x| (0.0..=1.0).contains(&x))));
        }
    }
}
