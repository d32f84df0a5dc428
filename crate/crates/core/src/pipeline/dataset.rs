//! Multi-view RGB-D sequences on disk.
//!
//! Layout, one directory per camera id from the manifest:
//!
//! ```text
//! root/
//!   cameras.toml
//!   cam00/color_000000.png
//!   cam00/depth_000000.pfm
//!   cam00/color_000001.png
//!   ...
//! ```
//!
//! Frame indices must run from 0 without gaps and every camera must have the
//! same number of frames. Frames are read on demand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_depth_png16, read_pfm, read_png, write_pfm, write_png};
use super::FrameInput;
use crate::camgeom::{Camera, CameraManifest};
use crate::raster::check_dims;
use crate::scenegen::{add_noise, render_scene, NoiseSpec, SceneSpec};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "cameras.toml";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DepthFormat {
    /// `depth_%06d.pfm`, meters.
    #[default]
    Pfm,
    /// `depth_%06d.png`, 16-bit, `mm_per_unit` millimeters per step.
    Png16 { mm_per_unit: f64 },
}

pub fn color_path(root: &Path, cam_id: &str, t: usize) -> PathBuf {
    root.join(cam_id).join(format!("color_{t:06}.png"))
}

pub fn depth_path(root: &Path, cam_id: &str, t: usize, format: DepthFormat) -> PathBuf {
    let ext = match format {
        DepthFormat::Pfm => "pfm",
        DepthFormat::Png16 { .. } => "png",
    };
    root.join(cam_id).join(format!("depth_{t:06}.{ext}"))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: CameraManifest,
    pub cameras: Vec<Camera>,
    pub depth_format: DepthFormat,
    frames: usize,
}

/// Frame indices of `color_NNNNNN.png` files in a camera directory.
fn scan_indices(dir: &Path) -> Result<Vec<usize>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name.strip_prefix("color_").and_then(|s| s.strip_suffix(".png")) else {
            continue;
        };
        if num.len() != 6 || !num.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::format(entry.path(), "frame index must have six digits"));
        }
        out.push(num.parse().expect("digits"));
    }
    out.sort_unstable();
    Ok(out)
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn camera_id(&self, idx: usize) -> &str {
        &self.manifest.cameras[idx].id
    }

    /// Colour, depth and camera of one view at frame `t`.
    pub fn view(&self, t: usize, cam: usize) -> Result<FrameInput> {
        let id = self.camera_id(cam);
        let camera = self.cameras[cam].clone();
        let cpath = color_path(&self.root, id, t);
        let color = read_png(&cpath)?;
        if color.dims() != camera.dims() {
            return Err(Error::format(
                &cpath,
                format!("image is {:?} but camera {id} is {:?}", color.dims(), camera.dims()),
            ));
        }
        let dpath = depth_path(&self.root, id, t, self.depth_format);
        let depth = match self.depth_format {
            DepthFormat::Pfm => read_pfm(&dpath)?,
            DepthFormat::Png16 { mm_per_unit } => read_depth_png16(&dpath, mm_per_unit)?,
        };
        if depth.dims() != camera.dims() {
            return Err(Error::format(
                &dpath,
                format!("depth is {:?} but camera {id} is {:?}", depth.dims(), camera.dims()),
            ));
        }
        Ok(FrameInput { color, depth, camera })
    }

    /// All views of frame `t`, in manifest order.
    pub fn frame(&self, t: usize) -> Result<Vec<FrameInput>> {
        (0..self.cameras.len()).map(|c| self.view(t, c)).collect()
    }

    /// Lazily reads frames in order.
    pub fn frames(&self) -> impl Iterator<Item = Result<Vec<FrameInput>>> + '_ {
        (0..self.frames).map(|t| self.frame(t))
    }
}

/// Opens a dataset, checking that every camera directory holds the same
/// contiguous run of frames. Image contents are not read here.
pub fn ingest_dataset(root: &Path, manifest: &Path, depth_format: DepthFormat) -> Result<Dataset> {
    let manifest = CameraManifest::load(manifest)?;
    let cameras = manifest.cameras()?;
    if cameras.is_empty() {
        return Err(Error::InvalidParameter("camera manifest is empty".into()));
    }
    let mut frames = None;
    for entry in &manifest.cameras {
        let dir = root.join(&entry.id);
        let idx = scan_indices(&dir)?;
        if let Some((pos, &bad)) = idx.iter().enumerate().find(|(i, &v)| *i != v) {
            let missing = if bad > pos { pos } else { bad };
            return Err(Error::format(
                color_path(root, &entry.id, missing),
                "frame indices must run from 0 without gaps",
            ));
        }
        match frames {
            None => frames = Some(idx.len()),
            Some(n) if n != idx.len() => {
                return Err(Error::format(
                    dir,
                    format!("{} frames, other cameras have {n}", idx.len()),
                ));
            }
            _ => {}
        }
    }
    let frames = frames.unwrap_or(0);
    if frames == 0 {
        return Err(Error::format(root, "dataset has no frames"));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        cameras,
        depth_format,
        frames,
    })
}

/// Renders every frame of a synthetic scene into the dataset layout, with
/// `noise` applied to the depth maps. Colour stays noise-free. Writes the
/// manifest and the scene description next to the frames.
pub fn export_synthetic(spec: &SceneSpec, noise: &NoiseSpec, root: &Path) -> Result<Dataset> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = CameraManifest {
        cameras: spec.rig.clone(),
    };
    let manifest_path = root.join(MANIFEST_NAME);
    manifest.save(&manifest_path)?;
    let scene_path = root.join("scene.toml");
    fs::write(&scene_path, spec.to_toml()).map_err(|e| Error::io(&scene_path, e))?;
    let cameras = spec.cameras()?;
    for (i, (entry, cam)) in spec.rig.iter().zip(&cameras).enumerate() {
        let dir = root.join(&entry.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in 0..spec.frames {
            let (color, depth) = render_scene(spec, cam, t)?;
            check_dims("rendered depth", cam.dims(), depth.dims())?;
            let noisy = add_noise(&depth, noise, ((t as u64) << 16) | i as u64)?;
            write_png(&color_path(root, &entry.id, t), &color)?;
            write_pfm(&depth_path(root, &entry.id, t, DepthFormat::Pfm), &noisy)?;
        }
    }
    ingest_dataset(root, &manifest_path, DepthFormat::Pfm)
}
