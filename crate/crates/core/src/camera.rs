//! Equirectangular camera model.
//!
//! Conventions: world Z is up and the XY plane is the ground. A camera looks
//! along +X at zero yaw, and a ray with yaw `psi` and pitch `theta` has the
//! unit direction `(cos(theta) cos(psi), cos(theta) sin(psi), sin(theta))`.
//!
//! Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
//! and has its center at `(i + 0.5, j + 0.5)`. Column `u = W/2` is yaw zero,
//! row `v = 0` is the zenith and row `v = H` the nadir.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default resolution of the generated panoramas (`W x H`).
pub const DEFAULT_WIDTH: usize = 512;
pub const DEFAULT_HEIGHT: usize = 128;

/// Camera height used when a trajectory only carries ground coordinates.
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.6;

/// Dimensions of an equirectangular image or feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EquirectGrid {
    width: usize,
    height: usize,
}

impl EquirectGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidGrid {
                width,
                height,
                reason: "both dimensions must be at least 2",
            });
        }
        if !width.is_multiple_of(2) {
            return Err(Error::InvalidGrid {
                width,
                height,
                reason: "width must be even",
            });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels, `W * H`.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Center of the pixel with flat index `row * W + col`.
    pub fn pixel_center(&self, index: usize) -> (f64, f64) {
        let row = index / self.width;
        let col = index % self.width;
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Flat index of the pixel containing the continuous coordinate `(u, v)`.
    pub fn pixel_index(&self, u: f64, v: f64) -> usize {
        let col = (u.floor() as isize).rem_euclid(self.width as isize) as usize;
        let row = (v.floor().max(0.0) as usize).min(self.height - 1);
        row * self.width + col
    }

    /// Iterator over all pixel centers in row-major order.
    pub fn pixel_centers(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.pixel_count()).map(|i| self.pixel_center(i))
    }
}

impl Default for EquirectGrid {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
        }
    }
}

impl std::str::FromStr for EquirectGrid {
    type Err = Error;

    /// Parses `WxH`, e.g. `512x128`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidConfig(format!("expected WxH, got {s:?}")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("expected WxH, got {s:?}")))
        };
        EquirectGrid::new(parse(w)?, parse(h)?)
    }
}

impl std::fmt::Display for EquirectGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A viewing ray given by yaw and pitch together with its unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayDir {
    yaw: f64,
    pitch: f64,
    dir: Vector3<f64>,
}

impl RayDir {
    /// Builds a ray from angles. Yaw is wrapped into `[-pi, pi)`; pitch must
    /// lie in `[-pi/2, pi/2]` (the poles are representable).
    pub fn from_angles(yaw: f64, pitch: f64) -> Result<Self> {
        if !(yaw.is_finite() && (-FRAC_PI_2..=FRAC_PI_2).contains(&pitch)) {
            return Err(Error::InvalidConfig(format!(
                "ray angles out of domain: yaw={yaw}, pitch={pitch}"
            )));
        }
        let yaw = normalize_yaw(yaw);
        Ok(Self {
            yaw,
            pitch,
            dir: angles_to_unit(yaw, pitch),
        })
    }

    /// Builds a ray from any nonzero direction vector.
    pub fn from_direction(d: &Vector3<f64>) -> Result<Self> {
        let norm = d.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateProjection);
        }
        let dir = d / norm;
        let (yaw, pitch) = unit_to_angles(&dir);
        Ok(Self { yaw, pitch, dir })
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn dir(&self) -> Vector3<f64> {
        self.dir
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let w = (yaw + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Unit direction of the ray with the given yaw and pitch.
pub fn angles_to_unit(yaw: f64, pitch: f64) -> Vector3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    Vector3::new(cp * cy, cp * sy, sp)
}

/// Yaw and pitch of a unit direction. At the poles yaw is reported as 0.
pub fn unit_to_angles(d: &Vector3<f64>) -> (f64, f64) {
    let horizontal = d.x.hypot(d.y);
    let pitch = d.z.atan2(horizontal);
    let yaw = if horizontal == 0.0 {
        0.0
    } else {
        normalize_yaw(d.y.atan2(d.x))
    };
    (yaw, pitch)
}

/// Ray through the continuous pixel coordinate `(u, v)`.
pub fn pixel_to_angles(u: f64, v: f64, grid: &EquirectGrid) -> Result<RayDir> {
    let w = grid.width as f64;
    let h = grid.height as f64;
    if !(0.0..w).contains(&u) || !(0.0..=h).contains(&v) {
        return Err(Error::PixelOutOfRange {
            u,
            v,
            width: grid.width,
            height: grid.height,
        });
    }
    let yaw = (u - w / 2.0) / w * TAU;
    let pitch = (h / 2.0 - v) / h * PI;
    Ok(RayDir {
        yaw,
        pitch,
        dir: angles_to_unit(yaw, pitch),
    })
}

/// Continuous pixel coordinate of a ray; exact inverse of [`pixel_to_angles`].
pub fn angles_to_pixel(ray: &RayDir, grid: &EquirectGrid) -> (f64, f64) {
    let w = grid.width as f64;
    let h = grid.height as f64;
    let mut u = ray.yaw / TAU * w + w / 2.0;
    if u >= w {
        u -= w;
    }
    let v = h / 2.0 - ray.pitch / PI * h;
    (u, v)
}

/// A 4-DoF ground camera pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose4DoF {
    pub translation: Vector3<f64>,
    yaw: f64,
}

impl Pose4DoF {
    pub fn new(translation: Vector3<f64>, yaw: f64) -> Self {
        Self {
            translation,
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// Camera-to-world rigid transform: rotation about world Z by the yaw,
    /// translation equal to the camera position.
    pub fn to_se3(&self) -> PoseSE3 {
        let rotation = *Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw).matrix();
        PoseSE3 {
            rotation,
            translation: self.translation,
        }
    }
}

/// A rigid transform `X -> R X + t`.
///
/// Whether it maps camera to world or world to camera coordinates depends on
/// the call site; [`Pose4DoF::to_se3`] returns camera-to-world transforms,
/// [`project_point`] expects a world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks orthonormality and `det(R) = 1` to within 1e-10.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if ortho > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidConfig(format!(
                "rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Pixel at which a world point appears, for a world-to-camera transform
/// `pose`: the pixel of the direction `R Q + t`.
pub fn project_point(q: &Vector3<f64>, pose: &PoseSE3, grid: &EquirectGrid) -> Result<(f64, f64)> {
    let cam = pose.apply(q);
    let ray = RayDir::from_direction(&cam)?;
    Ok(angles_to_pixel(&ray, grid))
}
