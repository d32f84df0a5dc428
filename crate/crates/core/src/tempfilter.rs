//! Temporal stabilisation of input-view depth.
//!
//! Cameras are static, so a colour change between consecutive frames of one
//! view flags motion. The soft mask `M = min(|I_t - I_(t-1)| / lambda_t + beta, 1)`
//! is evaluated at quarter resolution, max-pooled 3x3, and upscaled back. The
//! filtered depth is then the convex blend `M * D_t + (1 - M) * Dfilt_(t-1)`.

use serde::{Deserialize, Serialize};

use crate::raster::{
    check_dims, downscale_quarter_color, is_valid_depth, maxpool3, upscale_bilinear, ColorImage, MapKind, ScalarMap,
    INVALID_DEPTH,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Mask floor for static pixels.
    pub beta: f64,
    /// Colour change that saturates the mask (together with `beta`).
    pub lambda_t: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            beta: 0.6,
            lambda_t: 0.7,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !(self.lambda_t > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "filter params need 0 <= beta <= 1 and lambda_t > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// What a view carries from the previous frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTemporalState {
    pub prev_color: ColorImage,
    pub prev_filtered_depth: ScalarMap,
}

/// Soft colour-difference mask between two frames of the same camera.
pub fn difference_mask(cur: &ColorImage, prev: &ColorImage, params: &FilterParams) -> Result<ScalarMap> {
    params.validate()?;
    check_dims("previous frame", cur.dims(), prev.dims())?;
    let (small_cur, small_prev) = (downscale_quarter_color(cur), downscale_quarter_color(prev));
    let data = small_cur
        .data
        .iter()
        .zip(&small_prev.data)
        .map(|(a, b)| {
            let diff = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum::<f64>() / 3.0;
            (diff / params.lambda_t + params.beta).min(1.0) as f32
        })
        .collect();
    let small = ScalarMap::from_vec(small_cur.width, small_cur.height, MapKind::Mask, data)?;
    Ok(upscale_bilinear(&maxpool3(&small), cur.width, cur.height))
}

/// Bootstrap mask used when a view has no previous frame.
pub fn bootstrap_mask(width: usize, height: usize) -> ScalarMap {
    ScalarMap::filled(width, height, MapKind::Mask, 1.0)
}

/// Temporally filtered depth. Without previous state the current depth is
/// returned unchanged. Where one side is invalid the other is kept.
pub fn filter_depth(cur_depth: &ScalarMap, mask: &ScalarMap, state: Option<&ViewTemporalState>) -> Result<ScalarMap> {
    check_dims("difference mask", cur_depth.dims(), mask.dims())?;
    let Some(state) = state else {
        return Ok(cur_depth.clone());
    };
    let prev = &state.prev_filtered_depth;
    check_dims("previous filtered depth", cur_depth.dims(), prev.dims())?;
    let data = cur_depth
        .data
        .iter()
        .zip(&prev.data)
        .zip(&mask.data)
        .map(|((&d, &p), &m)| match (is_valid_depth(d), is_valid_depth(p)) {
            (true, true) => {
                let m = m.clamp(0.0, 1.0) as f64;
                (m * d as f64 + (1.0 - m) * p as f64) as f32
            }
            (true, false) => d,
            (false, true) => p,
            (false, false) => INVALID_DEPTH,
        })
        .collect();
    ScalarMap::from_vec(cur_depth.width, cur_depth.height, MapKind::Depth, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn textured(w: usize, h: usize) -> ColorImage {
        ColorImage::from_fn(w, h, |x, y| {
            let t = ((x * 7 + y * 13) % 17) as f32 / 16.0;
            [t, 1.0 - t, 0.5 * t]
        })
    }

    #[test]
    fn static_frames_give_beta() {
        let img = textured(33, 17);
        let m = difference_mask(&img, &img, &FilterParams::default()).unwrap();
        assert_eq!(m.dims(), (33, 17));
        assert!(m.data.iter().all(|&x| (x - 0.6).abs() < 1e-6));
    }

    #[test]
    fn saturating_change_gives_one() {
        let prev = ColorImage::filled(16, 16, [0.1, 0.2, 0.3]);
        let cur = ColorImage::filled(16, 16, [0.38, 0.48, 0.58]);
        let m = difference_mask(&cur, &prev, &FilterParams::default()).unwrap();
        assert!(m.data.iter().all(|&x| (x - 1.0).abs() < 1e-6), "{:?}", &m.data[..4]);
    }

    /// Direct evaluation of the mask pipeline, one output pixel at a time.
    fn brute_force_mask(cur: &ColorImage, prev: &ColorImage, beta: f64, lambda: f64) -> Vec<f64> {
        let (w, h) = cur.dims();
        let (qw, qh) = (w.div_ceil(4), h.div_ceil(4));
        let quarter = |qx: usize, qy: usize| -> f64 {
            let mut sums = [[0.0; 3]; 2];
            let mut n = 0.0;
            for y in qy * 4..(qy * 4 + 4).min(h) {
                for x in qx * 4..(qx * 4 + 4).min(w) {
                    for c in 0..3 {
                        sums[0][c] += cur.get(x, y)[c] as f64;
                        sums[1][c] += prev.get(x, y)[c] as f64;
                    }
                    n += 1.0;
                }
            }
            let d: f64 = (0..3).map(|c| (sums[0][c] / n - sums[1][c] / n).abs()).sum::<f64>() / 3.0;
            (d / lambda + beta).min(1.0)
        };
        let pooled = |qx: i64, qy: i64| -> f64 {
            let mut m = f64::MIN;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (qx + dx, qy + dy);
                    if x >= 0 && y >= 0 && (x as usize) < qw && (y as usize) < qh {
                        m = m.max(quarter(x as usize, y as usize));
                    }
                }
            }
            m
        };
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let sx = ((x as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, (qw - 1) as f64);
                let sy = ((y as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, (qh - 1) as f64);
                let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
                let (x1, y1) = ((x0 + 1).min(qw as i64 - 1), (y0 + 1).min(qh as i64 - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                out[y * w + x] = (1.0 - fx) * (1.0 - fy) * pooled(x0, y0)
                    + fx * (1.0 - fy) * pooled(x1, y0)
                    + (1.0 - fx) * fy * pooled(x0, y1)
                    + fx * fy * pooled(x1, y1);
            }
        }
        out
    }

    #[test]
    fn changed_block_grows_under_pooling() {
        let mut prev = textured(32, 32);
        let mut cur = prev.clone();
        for y in 12..16 {
            for x in 12..16 {
                prev.set(x, y, [0.0; 3]);
                cur.set(x, y, [1.0; 3]);
            }
        }
        let m = difference_mask(&cur, &prev, &FilterParams::default()).unwrap();
        let oracle = brute_force_mask(&cur, &prev, 0.6, 0.7);
        for (a, b) in m.data.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        let ones: Vec<(usize, usize)> = (0..32)
            .flat_map(|y| (0..32).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y) >= 1.0 - 1e-6)
            .collect();
        for y in 12..16 {
            for x in 12..16 {
                assert!(ones.contains(&(x, y)));
            }
        }
        assert!(ones.len() > 16);
        assert!(ones
            .iter()
            .any(|&(x, y)| !(12..16).contains(&x) || !(12..16).contains(&y)));
    }

    #[test]
    fn mask_rejects_size_mismatch() {
        let a = ColorImage::filled(8, 8, [0.0; 3]);
        let b = ColorImage::filled(8, 4, [0.0; 3]);
        assert!(matches!(
            difference_mask(&a, &b, &FilterParams::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn state(prev: f32, w: usize, h: usize) -> ViewTemporalState {
        ViewTemporalState {
            prev_color: ColorImage::filled(w, h, [0.0; 3]),
            prev_filtered_depth: ScalarMap::filled(w, h, MapKind::Depth, prev),
        }
    }

    #[test]
    fn full_mask_keeps_current_depth() {
        let cur = ScalarMap::from_fn(4, 3, MapKind::Depth, |x, y| 1.0 + (x + y) as f32 * 0.1);
        let out = filter_depth(&cur, &bootstrap_mask(4, 3), Some(&state(9.0, 4, 3))).unwrap();
        assert_eq!(out, cur);
    }

    #[test]
    fn static_mask_blends() {
        let cur = ScalarMap::filled(2, 2, MapKind::Depth, 2.0);
        let mask = ScalarMap::filled(2, 2, MapKind::Mask, 0.6);
        let out = filter_depth(&cur, &mask, Some(&state(1.0, 2, 2))).unwrap();
        assert!(out.data.iter().all(|&d| (d - 1.6).abs() < 1e-6));
    }

    #[test]
    fn no_state_is_identity() {
        let cur = ScalarMap::filled(3, 3, MapKind::Depth, 2.5);
        let mask = ScalarMap::filled(3, 3, MapKind::Mask, 0.6);
        assert_eq!(filter_depth(&cur, &mask, None).unwrap(), cur);
    }

    #[test]
    fn invalid_sides_fall_back() {
        let cur = ScalarMap::from_vec(3, 1, MapKind::Depth, vec![2.0, INVALID_DEPTH, INVALID_DEPTH]).unwrap();
        let mut st = state(1.0, 3, 1);
        st.prev_filtered_depth.data = vec![INVALID_DEPTH, 1.0, INVALID_DEPTH];
        let mask = ScalarMap::filled(3, 1, MapKind::Mask, 0.6);
        let out = filter_depth(&cur, &mask, Some(&st)).unwrap();
        assert_eq!(out.data, vec![2.0, 1.0, INVALID_DEPTH]);
    }

    #[test]
    fn filter_rejects_size_mismatch() {
        let cur = ScalarMap::filled(3, 3, MapKind::Depth, 2.5);
        let mask = ScalarMap::filled(3, 2, MapKind::Mask, 0.6);
        assert!(filter_depth(&cur, &mask, None).is_err());
    }

    /// Monte-Carlo oracle for the static recursion with M = beta = 0.6 and
    /// i.i.d. noise, cross-checked against the closed-form stationary std
    /// `sigma * sqrt(beta / (2 - beta))`.
    #[test]
    fn static_noise_contraction_matches_closed_form() {
        let sigma = 0.005;
        let beta = 0.6f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let noise = Normal::new(0.0, sigma).unwrap();
        let (w, h) = (64, 64);
        let mask = ScalarMap::filled(w, h, MapKind::Mask, beta as f32);
        let mut st: Option<ViewTemporalState> = None;
        let mut filtered = ScalarMap::filled(w, h, MapKind::Depth, 2.0);
        for _ in 0..30 {
            let raw = ScalarMap::from_vec(
                w,
                h,
                MapKind::Depth,
                (0..w * h).map(|_| (2.0 + noise.sample(&mut rng)) as f32).collect(),
            )
            .unwrap();
            let m = if st.is_some() {
                mask.clone()
            } else {
                bootstrap_mask(w, h)
            };
            filtered = filter_depth(&raw, &m, st.as_ref()).unwrap();
            st = Some(ViewTemporalState {
                prev_color: ColorImage::filled(w, h, [0.0; 3]),
                prev_filtered_depth: filtered.clone(),
            });
        }
        let n = filtered.data.len() as f64;
        let std = (filtered.data.iter().map(|&d| (d as f64 - 2.0).powi(2)).sum::<f64>() / n).sqrt();
        let closed = sigma * (beta / (2.0 - beta)).sqrt();
        // Frozen from this simulation: ratio ~0.655, i.e. above 0.55.
        assert!((std / sigma - 0.6547).abs() < 0.02, "ratio {}", std / sigma);
        assert!((std - closed).abs() / closed < 0.03);
    }

    proptest! {
        #[test]
        fn filtered_depth_is_convex(
            cur in proptest::collection::vec(0.1f32..10.0, 12),
            prev in proptest::collection::vec(0.1f32..10.0, 12),
            mask in proptest::collection::vec(0.0f32..=1.0, 12),
        ) {
            let c = ScalarMap::from_vec(4, 3, MapKind::Depth, cur.clone()).unwrap();
            let m = ScalarMap::from_vec(4, 3, MapKind::Mask, mask).unwrap();
            let st = ViewTemporalState {
                prev_color: ColorImage::filled(4, 3, [0.0; 3]),
                prev_filtered_depth: ScalarMap::from_vec(4, 3, MapKind::Depth, prev.clone()).unwrap(),
            };
            let out = filter_depth(&c, &m, Some(&st)).unwrap();
            for i in 0..12 {
                let (lo, hi) = (cur[i].min(prev[i]), cur[i].max(prev[i]));
                prop_assert!(out.data[i] >= lo * (1.0 - 1e-6) && out.data[i] <= hi * (1.0 + 1e-6));
            }
        }

        #[test]
        fn mask_stays_in_range(a in proptest::collection::vec(0.0f32..=1.0, 3 * 70), b in proptest::collection::vec(0.0f32..=1.0, 3 * 70)) {
            let to_img = |v: &[f32]| ColorImage::from_vec(10, 7, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
            let m = difference_mask(&to_img(&a), &to_img(&b), &FilterParams::default()).unwrap();
            prop_assert!(m.data.iter().all(|&x| (0.6 - 1e-6..=1.0).contains(&x)));
        }
    }
}
