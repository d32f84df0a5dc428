//! Image quality and consistency metrics.
//!
//! PSNR and SSIM work on `[0, 1]` intensities. L1 is reported on a 0-255
//! scale. SDT and SDV are population standard deviations of per-frame and
//! per-view L1 respectively.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) that is renormalised where
//! it leaves the image, `C1 = 0.01^2`, `C2 = 0.03^2`, and averages the SSIM
//! map over pixels and then channels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{check_dims, ColorImage};
use crate::{Error, Result};

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_RADIUS: i64 = 5;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_dims("metric input", a.dims(), b.dims())?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.data.len()).max(1) as f64)
}

pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute error on a 0-255 scale.
pub fn l1(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_dims("metric input", a.dims(), b.dims())?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] as f64 - q[c] as f64).abs()).sum::<f64>())
        .sum();
    Ok(255.0 * sum / (3 * a.data.len()).max(1) as f64)
}

fn gaussian_taps() -> Vec<f64> {
    (-SSIM_RADIUS..=SSIM_RADIUS)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Gaussian-weighted local mean, renormalised at the borders.
fn local_mean(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, g) in taps.iter().enumerate() {
                    let d = t as i64 - SSIM_RADIUS;
                    let (xx, yy) = if horizontal {
                        (x as i64 + d, y as i64)
                    } else {
                        (x as i64, y as i64 + d)
                    };
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    acc += g * src[yy as usize * w + xx as usize];
                    norm += g;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, taps: &[f64]) -> f64 {
    let mu_a = local_mean(a, w, h, taps);
    let mu_b = local_mean(b, w, h, taps);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, e_bb, e_ab) = (
        local_mean(&aa, w, h, taps),
        local_mean(&bb, w, h, taps),
        local_mean(&ab, w, h, taps),
    );
    let mut sum = 0.0;
    for i in 0..w * h {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (var_a + var_b + C2);
        sum += num / den;
    }
    sum / (w * h) as f64
}

pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_dims("metric input", a.dims(), b.dims())?;
    let (w, h) = a.dims();
    if w == 0 || h == 0 {
        return Err(Error::InvalidParameter("SSIM of an empty image".into()));
    }
    let taps = gaussian_taps();
    let total: f64 = (0..3)
        .into_par_iter()
        .map(|c| {
            let ca: Vec<f64> = a.data.iter().map(|p| p[c] as f64).collect();
            let cb: Vec<f64> = b.data.iter().map(|p| p[c] as f64).collect();
            ssim_channel(&ca, &cb, w, h, &taps)
        })
        .sum();
    Ok(total / 3.0)
}

fn abs_diff(a: &ColorImage, b: &ColorImage) -> Result<ColorImage> {
    check_dims("consecutive frames", a.dims(), b.dims())?;
    Ok(ColorImage {
        width: a.width,
        height: a.height,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(p, q)| [0, 1, 2].map(|c| (p[c] - q[c]).abs()))
            .collect(),
    })
}

fn check_sequences(rendered: &[ColorImage], gt: &[ColorImage]) -> Result<()> {
    if rendered.len() != gt.len() {
        return Err(Error::InvalidParameter(format!(
            "{} rendered frames vs {} ground-truth frames",
            rendered.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// SSIM between the rendered and ground-truth changes across one frame step.
pub fn temporal_change_ssim(r_prev: &ColorImage, r: &ColorImage, g_prev: &ColorImage, g: &ColorImage) -> Result<f64> {
    ssim(&abs_diff(r_prev, r)?, &abs_diff(g_prev, g)?)
}

/// Temporal change consistency: mean over consecutive frame pairs of the SSIM
/// between the rendered and ground-truth absolute frame differences.
pub fn tcc(rendered: &[ColorImage], gt: &[ColorImage]) -> Result<f64> {
    check_sequences(rendered, gt)?;
    if rendered.len() < 2 {
        return Err(Error::NotEnoughFrames {
            required: 2,
            found: rendered.len(),
        });
    }
    let scores = (0..rendered.len() - 1)
        .into_par_iter()
        .map(|t| temporal_change_ssim(&rendered[t], &rendered[t + 1], &gt[t], &gt[t + 1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Population standard deviation; 0 for fewer than two values.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standard deviation over time of the per-frame L1 error.
pub fn sdt(rendered: &[ColorImage], gt: &[ColorImage]) -> Result<f64> {
    check_sequences(rendered, gt)?;
    let errs = rendered
        .par_iter()
        .zip(gt)
        .map(|(r, g)| l1(r, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(population_std(&errs))
}

/// Standard deviation over views of per-view L1 errors.
pub fn sdv(per_view_l1: &[f64]) -> f64 {
    population_std(per_view_l1)
}

/// One JSON line per evaluated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

pub fn frame_metrics(frame: usize, rendered: &ColorImage, gt: &ColorImage) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        frame,
        psnr: psnr(rendered, gt)?,
        ssim: ssim(rendered, gt)?,
        l1: l1(rendered, gt)?,
    })
}

/// Sequence-level record. Metrics that need external networks or reference
/// code are listed as not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_l1: f64,
    pub tcc: Option<f64>,
    pub sdt: f64,
    pub lpips: String,
    pub sted: String,
}

pub fn sequence_metrics(rendered: &[ColorImage], gt: &[ColorImage]) -> Result<SequenceMetrics> {
    check_sequences(rendered, gt)?;
    let per = rendered
        .par_iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (r, g))| frame_metrics(t, r, g))
        .collect::<Result<Vec<_>>>()?;
    let n = per.len().max(1) as f64;
    let l1s: Vec<f64> = per.iter().map(|m| m.l1).collect();
    Ok(SequenceMetrics {
        frames: per.len(),
        mean_psnr: per.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
        mean_l1: l1s.iter().sum::<f64>() / n,
        tcc: if rendered.len() >= 2 {
            Some(tcc(rendered, gt)?)
        } else {
            None
        },
        sdt: population_std(&l1s),
        lpips: "not computed".into(),
        sted: "not computed".into(),
    })
}
