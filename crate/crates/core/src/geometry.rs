//! Pinhole cameras and the world / camera / pixel / BEV frames.
//!
//! World frame: `x` forward, `y` right, `z` down (metres). A point at
//! altitude `h` above the ground plane has `z = -h`.
//!
//! Camera frame: `x` right, `y` down, `z` along the optical axis. A world
//! point `p` maps to pixels by `d * [u, v, 1]^T = K (R p + T)`, where `d` is
//! the camera-frame depth. This is the 3x3 intrinsic matrix applied to the
//! camera-frame point, which equals `[K | 0]` times the homogeneous 4x4
//! extrinsic.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const ORTHO_TOL: f64 = 1e-9;

/// Intrinsics plus world-to-camera extrinsics of one pinhole camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraRecord", try_from = "CameraRecord")]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub image_width: usize,
    pub image_height: usize,
    pub fov_deg: f64,
}

/// Row-major serialized form of [`CameraModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraRecord {
    intrinsics: [[f64; 3]; 3],
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    image_width: usize,
    image_height: usize,
    fov_deg: f64,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

fn from_rows(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| a[r][c])
}

impl From<CameraModel> for CameraRecord {
    fn from(cam: CameraModel) -> Self {
        CameraRecord {
            intrinsics: rows(&cam.intrinsics),
            rotation: rows(&cam.rotation),
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
            image_width: cam.image_width,
            image_height: cam.image_height,
            fov_deg: cam.fov_deg,
        }
    }
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = crate::error::Error;

    fn try_from(rec: CameraRecord) -> Result<Self> {
        CameraModel::new(
            from_rows(&rec.intrinsics),
            from_rows(&rec.rotation),
            Vector3::from(rec.translation),
            rec.image_width,
            rec.image_height,
            rec.fov_deg,
        )
    }
}

/// A pixel hit by a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth in metres.
    pub depth: f64,
}

impl CameraModel {
    /// Builds a camera from raw parts, checking that `rotation` is a proper
    /// rotation and the focal lengths are positive.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_width: usize,
        image_height: usize,
        fov_deg: f64,
    ) -> Result<Self> {
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return invalid("focal lengths must be positive");
        }
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !(ortho <= ORTHO_TOL) || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return invalid("rotation must be orthonormal with determinant +1");
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return invalid("translation must be finite");
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            image_width,
            image_height,
            fov_deg,
        })
    }

    /// Camera at the world origin with `R = I` and the given intrinsics.
    pub fn with_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let fov = 2.0 * (width as f64 / 2.0 / fx).atan().to_degrees();
        Self::new(k, Matrix3::identity(), Vector3::zeros(), width, height, fov)
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// Optical centre in world coordinates, `-R^T T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-frame direction of the ray through `(u, v)`, scaled so that its
    /// camera-frame `z` component is 1. Walking `d` along it from
    /// [`center`](Self::center) reaches camera depth `d`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let xn = (u - self.cx()) / self.fx();
        let yn = (v - self.cy()) / self.fy();
        self.rotation.transpose() * Vector3::new(xn, yn, 1.0)
    }

    /// Camera-frame coordinates of a world point.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Projects a world point; `None` when it lies on or behind the image
    /// plane. The pixel may fall outside the image.
    pub fn project(&self, p: &Vector3<f64>) -> Option<PixelProjection> {
        let pc = self.to_camera(p);
        if !(pc.z > 0.0) {
            return None;
        }
        let h = self.intrinsics * pc;
        Some(PixelProjection {
            u: h.x / h.z,
            v: h.y / h.z,
            depth: pc.z,
        })
    }

    /// Inverse of [`project`](Self::project) at a known depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return invalid(format!("depth must be positive, got {depth}"));
        }
        Ok(self.unproject_unchecked(u, v, depth))
    }

    #[inline]
    pub(crate) fn unproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.center() + self.pixel_ray(u, v) * depth
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_width as f64 && v < self.image_height as f64
    }
}

/// Body-to-world rotation for pitch, then yaw, then roll, each applied about
/// the body axes produced by the previous step (body: `x` forward, `y`
/// right, `z` down). Positive pitch raises the nose.
pub fn body_to_world(pitch_deg: f64, yaw_deg: f64, roll_deg: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sr, cr) = roll_deg.to_radians().sin_cos();
    let pitch = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let yaw = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let roll = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    pitch * yaw * roll
}

/// Maps body axes (forward, right, down) to camera axes (right, down, forward).
fn camera_from_body() -> Matrix3<f64> {
    Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0)
}

/// Builds a camera from its field of view and pose. The principal point is
/// the image centre and pixels are square.
pub fn make_camera(
    fov_deg: f64,
    width: usize,
    height: usize,
    position: Vector3<f64>,
    pitch_deg: f64,
    yaw_deg: f64,
    roll_deg: f64,
) -> Result<CameraModel> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return invalid(format!("fov_deg must be in (0, 180), got {fov_deg}"));
    }
    if width == 0 || height == 0 {
        return invalid("image dimensions must be positive");
    }
    let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    let k = Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0);
    let r = camera_from_body() * body_to_world(pitch_deg, yaw_deg, roll_deg).transpose();
    let t = -(r * position);
    CameraModel::new(k, r, t, width, height, fov_deg)
}

/// Metric BEV raster over the perception range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
    pub n_x: usize,
    pub n_y: usize,
}

impl BevGrid {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !(x_max > x_min) || !(y_max > y_min) {
            return invalid("grid extent must be non-empty with positive cell size");
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cell_size,
            n_x: ((x_max - x_min) / cell_size).round() as usize,
            n_y: ((y_max - y_min) / cell_size).round() as usize,
        })
    }

    /// Cell containing `p` (only `x`, `y` are used), or `None` outside.
    #[inline]
    pub fn cell_of(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        self.cell_of_xy(p.x, p.y)
    }

    #[inline]
    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x_min) / self.cell_size).floor();
        let fy = ((y - self.y_min) / self.cell_size).floor();
        // NaN fails both comparisons.
        if fx >= 0.0 && fy >= 0.0 && fx < self.n_x as f64 && fy < self.n_y as f64 {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.cell_size,
            self.y_min + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

impl Default for BevGrid {
    fn default() -> Self {
        Self::new(0.0, 160.0, -55.0, 55.0, 0.5).expect("default grid")
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project_world_to_pixel(p: &Vector3<f64>, cam: &CameraModel) -> Option<PixelProjection> {
    cam.project(p)
}

/// Free-function form of [`CameraModel::unproject`].
pub fn unproject_pixel_to_world(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Vector3<f64>> {
    cam.unproject(u, v, depth)
}

/// Free-function form of [`BevGrid::cell_of`].
pub fn bev_cell_of(p: &Vector3<f64>, grid: &BevGrid) -> Option<(usize, usize)> {
    grid.cell_of(p)
}
