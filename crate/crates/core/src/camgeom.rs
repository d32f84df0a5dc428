//! Pinhole camera model.
//!
//! Poses are stored world-to-camera: a world point `p` maps to camera space as
//! `R p + t`. Continuous pixel coordinates put the centre of pixel `(i, j)` at
//! `(i + 0.5, j + 0.5)`, so `u = fx * x / z + cx` with no extra offset.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Point3, Result};

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, meters.
    pub translation: Vector3<f64>,
}

/// Continuous pixel position plus camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, s: f64) -> Point3 {
        self.origin + self.direction * s
    }
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the origin looking down +z, principal point at the image centre.
    pub fn identity(f: f64, width: usize, height: usize) -> Self {
        Camera {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`. Image `y` points along `-up`.
    pub fn look_at(eye: Point3, target: Point3, up: Vector3<f64>, f: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = (-up)
            .cross(&forward)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view axis".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidCamera(msg));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero".into());
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!("principal point ({}, {}) outside the image", self.cx, self.cy));
        }
        let ortho = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if ortho.amax() >= 1e-6 || (self.rotation.determinant() - 1.0).abs() >= 1e-6 {
            return bad("rotation is not a proper orthonormal matrix".into());
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return bad("translation is not finite".into());
        }
        Ok(())
    }

    /// Camera centre in world space, `-Rᵀ t`.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world space.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Project a world point. `None` is the behind-camera marker.
    pub fn project(&self, p: &Point3) -> Option<Projection> {
        self.project_camera_space(&self.to_camera(p))
    }

    #[inline]
    pub fn project_camera_space(&self, q: &Vector3<f64>) -> Option<Projection> {
        if q.z <= MIN_DEPTH {
            return None;
        }
        Some(Projection {
            u: self.fx * q.x / q.z + self.cx,
            v: self.fy * q.y / q.z + self.cy,
            z: q.z,
        })
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Point3> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.center() + self.depth_direction(u, v) * depth)
    }

    /// World-space direction through `(u, v)` scaled to unit camera-space z,
    /// so `center() + depth_direction(u, v) * z` sits at depth `z`.
    pub fn depth_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let local = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * local
    }

    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Ray {
        Ray {
            origin: self.center(),
            direction: self.depth_direction(u, v).normalize(),
        }
    }

    /// Cosine of the widest angle between a pixel ray and the optical axis.
    pub fn min_axis_cosine(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(u, v)| {
                let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
                1.0 / d.norm()
            })
            .fold(1.0, f64::min)
    }

    pub fn same_pose(&self, other: &Camera) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

/// How "closest" input views are ranked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    /// Euclidean distance between camera centres.
    #[default]
    CenterDistance,
    /// Angle between optical axes, centre distance as the secondary key.
    ViewAngle,
}

/// Indices of the `k` input cameras closest to `target`. Ties go to the lower
/// index. With `exclude_self`, cameras whose pose is bitwise equal to the
/// target's are never returned.
pub fn select_nearest_views(
    all: &[Camera],
    target: &Camera,
    k: usize,
    strategy: ViewSelection,
    exclude_self: bool,
) -> Result<Vec<usize>> {
    let tc = target.center();
    let tf = target.forward();
    let mut ranked: Vec<(f64, f64, usize)> = all
        .iter()
        .enumerate()
        .filter(|(_, c)| !(exclude_self && c.same_pose(target)))
        .map(|(i, c)| {
            let dist = (c.center() - tc).norm();
            match strategy {
                ViewSelection::CenterDistance => (dist, 0.0, i),
                ViewSelection::ViewAngle => (1.0 - c.forward().dot(&tf), dist, i),
            }
        })
        .collect();
    if k > ranked.len() {
        return Err(Error::NotEnoughViews {
            requested: k,
            available: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(ranked.into_iter().take(k).map(|(_, _, i)| i).collect())
}

/// One entry of a camera manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraEntry {
    pub fn from_camera(id: impl Into<String>, cam: &Camera) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = cam.rotation[(r, c)];
            }
        }
        CameraEntry {
            id: id.into(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation,
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from_column_slice(&self.translation),
        )
        .map_err(|e| Error::InvalidCamera(format!("camera {:?}: {e}", self.id)))
    }
}

/// TOML camera manifest: a list of `[[cameras]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraManifest {
    pub cameras: Vec<CameraEntry>,
}

impl CameraManifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let manifest: CameraManifest = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        for entry in &manifest.cameras {
            entry.to_camera()?;
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.cameras.iter().map(CameraEntry::to_camera).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }
}
