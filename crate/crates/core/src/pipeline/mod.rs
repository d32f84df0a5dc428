//! Per-frame orchestration and sequence runs.
//!
//! One frame runs these stages, each timed separately:
//!
//! 1. `filter`: difference masks and temporal depth filtering per input view.
//! 2. `mask-splat`: input masks splatted into the target, accumulated weight update.
//!    The colour splats of stage 4 ride along in the same pass when this runs.
//! 3. `tsdf`: image-space TSDF ray march for the target depth.
//! 4. `splat`: forward warping of every input view.
//! 5. `blend`: features, weights, foreground blend and background composite.
//!
//! Between frames only a [`FrameState`] is carried; nothing looks ahead.
//!
//! [`run_sequence`] writes `frame_%06d.png`, `depth_%06d.pfm` and a
//! `report.jsonl` with one `"frame"` record per frame and a closing
//! `"summary"` record:
//!
//! ```text
//! {"kind":"frame","frame":0,"views":["cam00","cam02"],"timings_ms":{"filter":1.2,"mask-splat":0.0,"tsdf":310.5,"splat":80.1,"blend":40.7},"total_ms":432.5,"depth_residual":0.0011,"hit_fraction":0.98,"metrics":{"frame":0,"psnr":38.2,"ssim":0.97,"l1":1.9}}
//! {"kind":"summary","frames":10,"metrics":{"frames":10,...,"lpips":"not computed","sted":"not computed"},"timings_ms":{"tsdf":{"mean":305.0,"p95":320.1},...}}
//! ```
//!
//! `metrics` is `null` when the target has no ground truth.

pub mod dataset;
pub mod io;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blend::{
    blend_foreground, composite_background, compute_features, depth_blend_residual, heuristic_weights, CameraDistance,
    Uniform, WeightProvider,
};
use crate::camgeom::{select_nearest_views, Camera, CameraEntry, ViewSelection};
use crate::imgtsdf::{
    raymarch_depth, splat_views_with_masks, update_accumulated_weight, HitWeights, TemporalInput, TsdfContext,
    TsdfParams,
};
use crate::metrics::{frame_metrics, population_std, temporal_change_ssim, FrameMetrics, SequenceMetrics};
use crate::raster::{check_dims, ColorImage, ScalarMap};
use crate::splat::{gaussians_from_view, render_splats, SplatParams, SplatRender};
use crate::tempfilter::{bootstrap_mask, difference_mask, filter_depth, FilterParams, ViewTemporalState};
use crate::{Error, Result};

use dataset::{ingest_dataset, DepthFormat, MANIFEST_NAME};
use io::{write_pfm, write_png};

pub const STAGES: [&str; 5] = ["filter", "mask-splat", "tsdf", "splat", "blend"];

/// One input view at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub color: ColorImage,
    pub depth: ScalarMap,
    pub camera: Camera,
}

/// The previous novel view as seen by the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    pub camera: Camera,
    pub depth: ScalarMap,
    pub hit_weights: HitWeights,
}

/// Everything a frame passes to the next. Empty before the first frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameState {
    /// Keyed by camera index in the rig.
    pub views: BTreeMap<usize, ViewTemporalState>,
    pub target: Option<TargetState>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendStrategy {
    Uniform,
    Distance,
    #[default]
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendParams {
    /// Depth disagreement scale in meters; twice the TSDF truncation if unset.
    pub sigma_d: Option<f64>,
    pub gamma: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        BlendParams {
            sigma_d: None,
            gamma: 2.0,
        }
    }
}

/// Which camera to render: a held-out rig camera (which then also provides
/// ground truth) or an explicit trajectory, one camera per frame with the
/// last one repeated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSpec {
    pub camera: Option<String>,
    pub trajectory: Vec<CameraEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameRange {
    pub start: usize,
    /// Exclusive; all remaining frames when unset.
    pub end: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    /// Defaults to `cameras.toml` inside the dataset.
    pub manifest: Option<PathBuf>,
    pub depth_format: DepthFormat,
    pub output: PathBuf,
    pub target: TargetSpec,
    pub frames: FrameRange,
    pub k: usize,
    pub view_selection: ViewSelection,
    pub temporal_filter: bool,
    pub temporal_tsdf: bool,
    pub blend_strategy: BlendStrategy,
    pub filter: FilterParams,
    pub tsdf: TsdfParams,
    pub splat: SplatParams,
    pub blend: BlendParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: PathBuf::from("dataset"),
            manifest: None,
            depth_format: DepthFormat::Pfm,
            output: PathBuf::from("out"),
            target: TargetSpec::default(),
            frames: FrameRange::default(),
            k: 4,
            view_selection: ViewSelection::CenterDistance,
            temporal_filter: true,
            temporal_tsdf: true,
            blend_strategy: BlendStrategy::Heuristic,
            filter: FilterParams::default(),
            tsdf: TsdfParams::default(),
            splat: SplatParams::default(),
            blend: BlendParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if self.target.camera.is_some() == !self.target.trajectory.is_empty() {
            return Err(Error::InvalidParameter(
                "target needs exactly one of `camera` or `trajectory`".into(),
            ));
        }
        if let Some(s) = self.blend.sigma_d {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!("blend.sigma_d must be > 0, got {s}")));
            }
        }
        self.filter.validate()?;
        self.tsdf.validate()
    }

    /// Parses a config; relative paths are taken relative to `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.dataset);
        rebase(&mut cfg.output);
        if let Some(m) = cfg.manifest.as_mut() {
            rebase(m);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.dataset.join(MANIFEST_NAME))
    }

    fn sigma_d(&self) -> f64 {
        self.blend.sigma_d.unwrap_or(2.0 * self.tsdf.tau)
    }
}

/// Wall time per stage in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub filter: f64,
    #[serde(rename = "mask-splat")]
    pub mask_splat: f64,
    pub tsdf: f64,
    pub splat: f64,
    pub blend: f64,
}

impl StageTimings {
    pub fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("filter", self.filter),
            ("mask-splat", self.mask_splat),
            ("tsdf", self.tsdf),
            ("splat", self.splat),
            ("blend", self.blend),
        ]
    }

    pub fn total(&self) -> f64 {
        self.entries().iter().map(|e| e.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub timings: StageTimings,
    /// Mean |TSDF depth - blended depth| in meters.
    pub depth_residual: Option<f64>,
    pub hit_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub image: ColorImage,
    pub depth: ScalarMap,
    pub renders: Vec<SplatRender>,
    pub diagnostics: Diagnostics,
    pub state: FrameState,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot = start.elapsed().as_secs_f64() * 1e3;
    out
}

/// Renders one novel view from the `inputs` (rig indices `view_ids`).
pub fn run_frame(
    inputs: &[FrameInput],
    view_ids: &[usize],
    target: &Camera,
    state: FrameState,
    cfg: &PipelineConfig,
) -> Result<FrameOutput> {
    if inputs.is_empty() {
        return Err(Error::NotEnoughViews {
            requested: cfg.k.max(1),
            available: 0,
        });
    }
    if view_ids.len() != inputs.len() {
        return Err(Error::InvalidParameter(format!(
            "{} view ids for {} inputs",
            view_ids.len(),
            inputs.len()
        )));
    }
    target.validate()?;
    for inp in inputs {
        check_dims("input colour vs camera", inp.camera.dims(), inp.color.dims())?;
        check_dims("input depth vs camera", inp.camera.dims(), inp.depth.dims())?;
    }
    if let Some(prev) = &state.target {
        check_dims("previous novel depth", target.dims(), prev.depth.dims())?;
    }
    let mut timings = StageTimings::default();
    let cams: Vec<Camera> = inputs.iter().map(|i| i.camera.clone()).collect();
    let need_masks = cfg.temporal_filter || cfg.temporal_tsdf;

    let filtered: Vec<(ScalarMap, ScalarMap)> = timed(&mut timings.filter, || {
        inputs
            .par_iter()
            .zip(view_ids)
            .map(|(inp, id)| {
                let prev = state.views.get(id);
                let mask = match prev {
                    Some(p) if need_masks => difference_mask(&inp.color, &p.prev_color, &cfg.filter)?,
                    _ => bootstrap_mask(inp.color.width, inp.color.height),
                };
                let depth = if cfg.temporal_filter {
                    filter_depth(&inp.depth, &mask, prev)?
                } else {
                    inp.depth.clone()
                };
                Ok((mask, depth))
            })
            .collect()
    })?;
    let (masks, depths): (Vec<ScalarMap>, Vec<ScalarMap>) = filtered.into_iter().unzip();

    // The colour splats share their geometry with the mask splats, so they
    // are rendered in the same pass when the mask is needed.
    let mut early_renders = None;
    let temporal = timed(&mut timings.mask_splat, || {
        let Some(prev) = state.target.as_ref().filter(|_| cfg.temporal_tsdf) else {
            return Ok(None);
        };
        let (w, h) = target.dims();
        let acc_weight = update_accumulated_weight(Some(&prev.hit_weights), w, h, &cfg.tsdf)?;
        let colors: Vec<&ColorImage> = inputs.iter().map(|i| &i.color).collect();
        let (mask, renders) = splat_views_with_masks(&colors, &masks, &cams, &depths, target, &cfg.splat)?;
        early_renders = Some(renders);
        Ok(Some(TemporalInput {
            target: target.clone(),
            prev_camera: prev.camera.clone(),
            prev_depth: prev.depth.clone(),
            mask,
            acc_weight,
        }))
    })?;

    let march = timed(&mut timings.tsdf, || {
        let views = cams.iter().cloned().zip(depths.iter().cloned()).collect();
        let ctx = TsdfContext::new(views, temporal, &cfg.tsdf)?;
        raymarch_depth(&ctx, target, &cfg.tsdf)
    })?;

    let renders: Vec<SplatRender> = timed(&mut timings.splat, || {
        if let Some(r) = early_renders {
            return Ok(r);
        }
        inputs
            .par_iter()
            .zip(&depths)
            .zip(view_ids)
            .map(|((inp, depth), &id)| {
                let set = gaussians_from_view(&inp.color, depth, &inp.camera, id, &cfg.splat)?;
                Ok(render_splats(&set, target, &cfg.splat))
            })
            .collect()
    })?;

    let (image, depth_residual) = timed(&mut timings.blend, || {
        let feats = compute_features(&renders, target, &march.depth, &cams)?;
        let weights = match cfg.blend_strategy {
            BlendStrategy::Uniform => Uniform.weights(&feats),
            BlendStrategy::Distance => CameraDistance.weights(&feats),
            BlendStrategy::Heuristic => heuristic_weights(&feats, cfg.sigma_d(), cfg.blend.gamma)?,
        };
        let fg = blend_foreground(&feats, &weights);
        Ok((
            composite_background(&fg, &weights),
            depth_blend_residual(&weights, &feats),
        ))
    })?;

    let hits = march.hitmask.data.iter().filter(|&&h| h > 0.0).count();
    let hit_fraction = hits as f64 / march.hitmask.data.len().max(1) as f64;
    let views = inputs
        .iter()
        .zip(view_ids)
        .zip(depths)
        .map(|((inp, &id), depth)| {
            (
                id,
                ViewTemporalState {
                    prev_color: inp.color.clone(),
                    prev_filtered_depth: depth,
                },
            )
        })
        .collect();
    let state = FrameState {
        views,
        target: Some(TargetState {
            camera: target.clone(),
            depth: march.depth.clone(),
            hit_weights: march.weights,
        }),
    };
    Ok(FrameOutput {
        image,
        depth: march.depth,
        renders,
        diagnostics: Diagnostics {
            timings,
            depth_residual,
            hit_fraction,
        },
        state,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub kind: String,
    pub frame: usize,
    pub views: Vec<String>,
    pub timings_ms: StageTimings,
    pub total_ms: f64,
    pub depth_residual: Option<f64>,
    pub hit_fraction: f64,
    pub metrics: Option<FrameMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub p95: f64,
}

impl TimingStats {
    /// Mean and nearest-rank 95th percentile.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return TimingStats { mean: 0.0, p95: 0.0 };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        TimingStats {
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            p95: sorted[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub kind: String,
    pub frames: usize,
    pub metrics: Option<SequenceMetrics>,
    pub timings_ms: BTreeMap<String, TimingStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub frames: Vec<FrameRecord>,
    pub summary: SummaryRecord,
}

pub const REPORT_NAME: &str = "report.jsonl";

pub fn frame_png_name(t: usize) -> String {
    format!("frame_{t:06}.png")
}

pub fn frame_pfm_name(t: usize) -> String {
    format!("depth_{t:06}.pfm")
}

/// Runs the configured frame range, writing images, depths and the report
/// into the output directory. Disk reads are not part of stage timings.
pub fn run_sequence(cfg: &PipelineConfig) -> Result<SequenceReport> {
    cfg.validate()?;
    let ds = ingest_dataset(&cfg.dataset, &cfg.manifest_path(), cfg.depth_format)?;
    let end = cfg.frames.end.unwrap_or(ds.frame_count()).min(ds.frame_count());
    if cfg.frames.start >= end {
        return Err(Error::InvalidParameter(format!(
            "empty frame range {}..{end} ({} frames available)",
            cfg.frames.start,
            ds.frame_count()
        )));
    }
    let held_out = match &cfg.target.camera {
        Some(id) => Some(
            ds.manifest
                .index_of(id)
                .ok_or_else(|| Error::InvalidParameter(format!("target camera {id:?} is not in the manifest")))?,
        ),
        None => None,
    };
    let trajectory: Vec<Camera> = cfg
        .target
        .trajectory
        .iter()
        .map(CameraEntry::to_camera)
        .collect::<Result<_>>()?;
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;

    let candidates: Vec<usize> = (0..ds.cameras.len()).filter(|&i| Some(i) != held_out).collect();
    let candidate_cams: Vec<Camera> = candidates.iter().map(|&i| ds.cameras[i].clone()).collect();

    let mut state = FrameState::default();
    let mut records = Vec::new();
    let mut prev_pair: Option<(ColorImage, ColorImage)> = None;
    let (mut tcc_scores, mut l1s) = (Vec::new(), Vec::new());
    let mut per_frame_metrics = Vec::new();
    for t in cfg.frames.start..end {
        let target = match held_out {
            Some(i) => ds.cameras[i].clone(),
            None => trajectory[(t - cfg.frames.start).min(trajectory.len() - 1)].clone(),
        };
        let picked = select_nearest_views(&candidate_cams, &target, cfg.k, cfg.view_selection, false)?;
        let ids: Vec<usize> = picked.iter().map(|&j| candidates[j]).collect();
        let inputs = ids.iter().map(|&i| ds.view(t, i)).collect::<Result<Vec<_>>>()?;
        let gt = held_out.map(|i| ds.view(t, i).map(|v| v.color)).transpose()?;

        let out = run_frame(&inputs, &ids, &target, state, cfg)?;
        state = out.state;
        write_png(&cfg.output.join(frame_png_name(t)), &out.image)?;
        write_pfm(&cfg.output.join(frame_pfm_name(t)), &out.depth)?;

        let metrics = match gt {
            Some(gt) => {
                let m = frame_metrics(t, &out.image, &gt)?;
                if let Some((r_prev, g_prev)) = &prev_pair {
                    tcc_scores.push(temporal_change_ssim(r_prev, &out.image, g_prev, &gt)?);
                }
                l1s.push(m.l1);
                per_frame_metrics.push(m.clone());
                prev_pair = Some((out.image, gt));
                Some(m)
            }
            None => None,
        };
        records.push(FrameRecord {
            kind: "frame".into(),
            frame: t,
            views: ids.iter().map(|&i| ds.camera_id(i).to_string()).collect(),
            timings_ms: out.diagnostics.timings,
            total_ms: out.diagnostics.timings.total(),
            depth_residual: out.diagnostics.depth_residual,
            hit_fraction: out.diagnostics.hit_fraction,
            metrics,
        });
    }

    let mut timings_ms = BTreeMap::new();
    for (i, stage) in STAGES.iter().enumerate() {
        let samples: Vec<f64> = records.iter().map(|r| r.timings_ms.entries()[i].1).collect();
        timings_ms.insert(stage.to_string(), TimingStats::from_samples(&samples));
    }
    let totals: Vec<f64> = records.iter().map(|r| r.total_ms).collect();
    timings_ms.insert("total".into(), TimingStats::from_samples(&totals));
    let metrics = (!per_frame_metrics.is_empty()).then(|| {
        let n = per_frame_metrics.len() as f64;
        SequenceMetrics {
            frames: per_frame_metrics.len(),
            mean_psnr: per_frame_metrics.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: per_frame_metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
            mean_l1: l1s.iter().sum::<f64>() / n,
            tcc: (!tcc_scores.is_empty()).then(|| tcc_scores.iter().sum::<f64>() / tcc_scores.len() as f64),
            sdt: population_std(&l1s),
            lpips: "not computed".into(),
            sted: "not computed".into(),
        }
    });
    let summary = SummaryRecord {
        kind: "summary".into(),
        frames: records.len(),
        metrics,
        timings_ms,
    };

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("serialisable"));
        text.push('\n');
    }
    text.push_str(&serde_json::to_string(&summary).expect("serialisable"));
    text.push('\n');
    let report_path = cfg.output.join(REPORT_NAME);
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    Ok(SequenceReport {
        frames: records,
        summary,
    })
}
