//! Epipolar geometry between two equirectangular cameras.
//!
//! For a query pixel in frame `m` with unit direction `d_m`, the matching
//! directions `d_n` in frame `n` satisfy `d_n^T E d_m = 0` with
//! `E = [t_mn]_x R_mn`. The zero set is the great circle with normal
//! `E d_m`, which traces a sinusoid-like curve across the panorama.

mod csr;
mod mask;

pub use csr::{read_masks, read_masks_text, write_masks, write_masks_text, PairMasks};
pub use mask::{
    band_residual_bound, epipolar_mask, EpipolarMask, EpipolarMasker, MaskConfig, MaskKind,
    MaskMode,
};

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::camera::{angles_to_pixel, pixel_to_angles, EquirectGrid, PoseSE3, RayDir};
use crate::error::{Error, Result};

/// Components below this (on unit-normalized vectors) are treated as zero.
pub const DEGENERATE_TOL: f64 = 1e-9;

/// Cross-product matrix: `skew(t) * b == t.cross(b)`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Transform from frame-`m` camera coordinates to frame-`n` camera
/// coordinates, given both cameras' camera-to-world poses:
/// `X_n = R_mn X_m + t_mn`.
pub fn relative_pose(pose_m: &PoseSE3, pose_n: &PoseSE3) -> PoseSE3 {
    pose_n.inverse().compose(pose_m)
}

/// `E = [t_mn]_x R_mn` for a frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    matrix: Matrix3<f64>,
    relative: PoseSE3,
    source: usize,
    target: usize,
}

impl EssentialMatrix {
    /// Builds `E` from the relative pose `m -> n`. Fails on a zero baseline.
    pub fn new(relative: &PoseSE3) -> Result<Self> {
        Self::between(relative, 0, 1)
    }

    /// As [`EssentialMatrix::new`], tagging the source and target frame ids.
    pub fn between(relative: &PoseSE3, source: usize, target: usize) -> Result<Self> {
        let t = relative.translation;
        if t.norm() == 0.0 || t.norm().is_nan() {
            return Err(Error::DegenerateBaseline {
                from: source,
                to: target,
            });
        }
        Ok(Self {
            matrix: skew(&t) * relative.rotation,
            relative: *relative,
            source,
            target,
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn relative(&self) -> &PoseSE3 {
        &self.relative
    }

    pub fn baseline(&self) -> Vector3<f64> {
        self.relative.translation
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Normal `E d_m` of the epipolar great circle in frame `n`.
    pub fn normal(&self, d_m: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * d_m
    }

    /// Unit normal of the epipolar plane of a query direction, or `None` when
    /// the query looks along the baseline (every target pixel matches).
    pub fn unit_normal(&self, d_m: &Vector3<f64>) -> Option<Vector3<f64>> {
        let n = self.normal(d_m);
        let norm = n.norm();
        if norm <= DEGENERATE_TOL * self.baseline().norm() {
            None
        } else {
            Some(n / norm)
        }
    }
}

/// Convenience wrapper for [`EssentialMatrix::new`].
pub fn essential(relative: &PoseSE3) -> Result<EssentialMatrix> {
    EssentialMatrix::new(relative)
}

/// Epipolar residual `d_n^T E d_m` of a pixel pair using unit directions.
pub fn residual(
    px_m: (f64, f64),
    px_n: (f64, f64),
    e: &EssentialMatrix,
    grid: &EquirectGrid,
) -> Result<f64> {
    let d_m = pixel_to_angles(px_m.0, px_m.1, grid)?.dir();
    let d_n = pixel_to_angles(px_n.0, px_n.1, grid)?.dir();
    Ok(d_n.dot(&(e.matrix * d_m)))
}

/// Scale-free residual: the sine of the angle between the target ray and
/// the epipolar plane. Returns `None` for an epipole query.
pub fn angular_residual(
    px_m: (f64, f64),
    px_n: (f64, f64),
    e: &EssentialMatrix,
    grid: &EquirectGrid,
) -> Result<Option<f64>> {
    let d_m = pixel_to_angles(px_m.0, px_m.1, grid)?.dir();
    let d_n = pixel_to_angles(px_n.0, px_n.1, grid)?.dir();
    Ok(e.unit_normal(&d_m).map(|n| d_n.dot(&n)))
}

/// How the epipolar great circle crosses one target column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColumnCrossing {
    /// Crosses once at continuous row `v`.
    At(f64),
    /// The whole column lies on the great circle.
    Whole,
    /// The circle is vertical and misses this column.
    Miss,
}

/// Crossing of the great circle with unit normal `n` through the column at
/// yaw `psi`: solves `n_x cos(psi) cos(theta) + n_y sin(psi) cos(theta) + n_z sin(theta) = 0`.
pub fn column_crossing(n: &Vector3<f64>, psi: f64, height: usize) -> ColumnCrossing {
    let (s, c) = psi.sin_cos();
    crossing_from_components(n.x * c + n.y * s, n.z, height)
}

/// Crossing for the in-plane term `a = n_x cos(psi) + n_y sin(psi)` and `n_z`.
pub(crate) fn crossing_from_components(a: f64, nz: f64, height: usize) -> ColumnCrossing {
    if nz.abs() < DEGENERATE_TOL {
        if a.abs() < DEGENERATE_TOL {
            ColumnCrossing::Whole
        } else {
            ColumnCrossing::Miss
        }
    } else {
        let theta = (-a / nz).atan();
        let h = height as f64;
        ColumnCrossing::At(h / 2.0 - theta / PI * h)
    }
}

/// Epipolar curve sampled at every target column center, refined between
/// columns where it is steep.
#[derive(Debug, Clone, PartialEq)]
pub enum EpipolarCurve {
    Traced {
        /// Curve points by ascending `u`: one per crossed column center, plus
        /// intermediate points wherever neighbouring samples differ by more
        /// than one row.
        points: Vec<(f64, f64)>,
        /// Columns lying entirely on the curve.
        whole_columns: Vec<usize>,
    },
    /// The query pixel is an epipole of frame `m`; every target pixel is a
    /// candidate.
    EpipoleQuery,
}

impl EpipolarCurve {
    pub fn points(&self) -> &[(f64, f64)] {
        match self {
            EpipolarCurve::Traced { points, .. } => points,
            EpipolarCurve::EpipoleQuery => &[],
        }
    }
}

/// Traces the epipolar curve of `px_m` in the target frame.
pub fn epipolar_curve(
    px_m: (f64, f64),
    e: &EssentialMatrix,
    grid: &EquirectGrid,
) -> Result<EpipolarCurve> {
    let d_m = pixel_to_angles(px_m.0, px_m.1, grid)?.dir();
    let Some(n) = e.unit_normal(&d_m) else {
        return Ok(EpipolarCurve::EpipoleQuery);
    };
    let w = grid.width() as f64;
    let crossing = |u: f64| {
        let psi = (u - w / 2.0) / w * std::f64::consts::TAU;
        column_crossing(&n, psi, grid.height())
    };
    let mut points = Vec::with_capacity(grid.width());
    let mut whole_columns = Vec::new();
    for col in 0..grid.width() {
        let u = col as f64 + 0.5;
        match crossing(u) {
            ColumnCrossing::At(v) => points.push((u, v)),
            ColumnCrossing::Whole => whole_columns.push(col),
            ColumnCrossing::Miss => {}
        }
    }
    // refine steep stretches, including the one across the seam
    let mut extra = Vec::new();
    for i in 0..points.len() {
        let (u0, v0) = points[i];
        let (mut u1, v1) = points[(i + 1) % points.len()];
        if u1 <= u0 {
            u1 += w;
        }
        if u1 - u0 <= 1.0 + 1e-9 {
            refine(&crossing, (u0, v0), (u1, v1), 48, &mut extra);
        }
    }
    for p in &mut extra {
        if p.0 >= w {
            p.0 -= w;
        }
    }
    if !extra.is_empty() {
        points.extend(extra);
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(EpipolarCurve::Traced {
        points,
        whole_columns,
    })
}

/// Bisects `[a, b]` until neighbouring points are at most one row apart.
fn refine(
    crossing: &impl Fn(f64) -> ColumnCrossing,
    a: (f64, f64),
    b: (f64, f64),
    depth: u32,
    out: &mut Vec<(f64, f64)>,
) {
    if depth == 0 || (b.1 - a.1).abs() <= 1.0 {
        return;
    }
    let u = 0.5 * (a.0 + b.0);
    let ColumnCrossing::At(v) = crossing(u) else {
        return;
    };
    refine(crossing, a, (u, v), depth - 1, out);
    out.push((u, v));
    refine(crossing, (u, v), b, depth - 1, out);
}

/// The two epipoles in frame `n`: pixels of `+t_mn` and `-t_mn`.
pub fn epipoles(relative: &PoseSE3, grid: &EquirectGrid) -> Result<[(f64, f64); 2]> {
    let t = relative.translation;
    if t.norm() == 0.0 || t.norm().is_nan() {
        return Err(Error::DegenerateBaseline { from: 0, to: 1 });
    }
    let plus = RayDir::from_direction(&t)?;
    let minus = RayDir::from_direction(&-t)?;
    Ok([angles_to_pixel(&plus, grid), angles_to_pixel(&minus, grid)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project_point, Pose4DoF};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> EquirectGrid {
        EquirectGrid::new(512, 128).unwrap()
    }

    fn translation(t: Vector3<f64>) -> PoseSE3 {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    fn random_pose(rng: &mut impl Rng) -> PoseSE3 {
        Pose4DoF::new(
            Vector3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(1.0..2.5),
            ),
            rng.random_range(-PI..PI),
        )
        .to_se3()
    }

    #[test]
    fn skew_matches_cross_product() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 10.0;
            let b = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 10.0;
            let cross = Vector3::new(
                t.y * b.z - t.z * b.y,
                t.z * b.x - t.x * b.z,
                t.x * b.y - t.y * b.x,
            );
            assert_abs_diff_eq!(skew(&t) * b, cross, epsilon = 1e-14 * 100.0);
            assert_eq!(skew(&t).transpose(), -skew(&t));
        }
    }

    #[test]
    fn relative_pose_anchors() {
        let p = Pose4DoF::new(Vector3::new(1.0, 2.0, 1.6), 0.7).to_se3();
        let rel = relative_pose(&p, &p);
        assert_abs_diff_eq!(rel.rotation, Matrix3::identity(), epsilon = 1e-15);
        assert_abs_diff_eq!(rel.translation, Vector3::zeros(), epsilon = 1e-15);

        // Same yaw, offset in world X: camera m sits at +X of camera n's frame
        // rotated into n's heading.
        let yaw = 0.5;
        let pm = Pose4DoF::new(Vector3::new(4.0, 0.0, 1.6), yaw).to_se3();
        let pn = Pose4DoF::new(Vector3::new(1.0, 0.0, 1.6), yaw).to_se3();
        let rel = relative_pose(&pm, &pn);
        assert_abs_diff_eq!(rel.rotation, Matrix3::identity(), epsilon = 1e-15);
        let expected = Vector3::new(3.0 * yaw.cos(), -3.0 * yaw.sin(), 0.0);
        assert_abs_diff_eq!(rel.translation, expected, epsilon = 1e-14);
    }

    #[test]
    fn essential_rejects_zero_baseline() {
        assert_eq!(
            EssentialMatrix::new(&PoseSE3::identity()),
            Err(Error::DegenerateBaseline { from: 0, to: 1 })
        );
        let e = EssentialMatrix::new(&translation(Vector3::x())).unwrap();
        assert_eq!(*e.matrix(), skew(&Vector3::x()));
    }

    #[test]
    fn essential_image_is_orthogonal_to_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let rel = relative_pose(&random_pose(&mut rng), &random_pose(&mut rng));
            let e = EssentialMatrix::new(&rel).unwrap();
            let d = Vector3::new(rng.random(), rng.random(), rng.random::<f64>());
            assert!(e.normal(&d).dot(&rel.translation).abs() < 1e-10);
            assert!((rel.translation.transpose() * e.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn residual_on_baseline_is_zero() {
        let g = grid();
        let e = EssentialMatrix::new(&translation(Vector3::x())).unwrap();
        assert_eq!(residual((256.0, 64.0), (256.0, 64.0), &e, &g).unwrap(), 0.0);
    }

    #[test]
    fn synthetic_correspondences_have_small_residual() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pm = random_pose(&mut rng);
            let pn = random_pose(&mut rng);
            let q = Vector3::new(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(0.0..10.0),
            );
            let e = EssentialMatrix::new(&relative_pose(&pm, &pn)).unwrap();
            let px_m = project_point(&q, &pm.inverse(), &g).unwrap();
            let px_n = project_point(&q, &pn.inverse(), &g).unwrap();
            assert!(residual(px_m, px_n, &e, &g).unwrap().abs() < 1e-10);
            // one pixel off the curve vertically
            let off = (px_n.0, (px_n.1 + 1.0).min(128.0));
            let r = angular_residual(px_m, off, &e, &g).unwrap().unwrap();
            assert!(r.abs() > 1e-12 || off.1 == 128.0);
        }
    }

    #[test]
    fn horizon_curve_for_vertical_normal() {
        // t = (0, 1, 0), d_m = (1, 0, 0): n = t x d_m = (0, 0, -1)
        let g = grid();
        let e = EssentialMatrix::new(&translation(Vector3::y())).unwrap();
        let curve = epipolar_curve((256.0, 64.0), &e, &g).unwrap();
        let pts = curve.points();
        assert_eq!(pts.len(), 512);
        for &(_, v) in pts {
            assert_abs_diff_eq!(v, 64.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn curve_points_satisfy_residual() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let rel = relative_pose(&random_pose(&mut rng), &random_pose(&mut rng));
            let e = EssentialMatrix::new(&rel).unwrap();
            let q = (rng.random_range(0.0..512.0), rng.random_range(0.0..128.0));
            let curve = epipolar_curve(q, &e, &g).unwrap();
            let scale = rel.translation.norm();
            for &p in curve.points() {
                assert!(residual(q, p, &e, &g).unwrap().abs() < 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn epipole_query_is_flagged() {
        let g = grid();
        let e = EssentialMatrix::new(&translation(Vector3::x())).unwrap();
        // frame-m direction along R^T t = +x is the pixel (256, 64)
        assert_eq!(
            epipolar_curve((256.0, 64.0), &e, &g).unwrap(),
            EpipolarCurve::EpipoleQuery
        );
    }

    #[test]
    fn forward_motion_curve_hits_both_epipoles() {
        let g = grid();
        let e = EssentialMatrix::new(&translation(Vector3::x())).unwrap();
        let curve = epipolar_curve((384.5, 64.5), &e, &g).unwrap();
        let pts = curve.points();
        let near = |target: (f64, f64)| {
            pts.iter()
                .map(|&(u, v)| {
                    let du = (u - target.0).abs();
                    let du = du.min(512.0 - du);
                    du.hypot(v - target.1)
                })
                .fold(f64::INFINITY, f64::min)
        };
        assert!(near((256.0, 64.0)) < 1.0);
        assert!(near((0.0, 64.0)) < 1.0);
    }

    #[test]
    fn epipole_anchors() {
        let g = grid();
        let [a, b] = epipoles(&translation(Vector3::x()), &g).unwrap();
        assert_eq!(a, (256.0, 64.0));
        assert_eq!(b, (0.0, 64.0));
        let [a, b] = epipoles(&translation(Vector3::z()), &g).unwrap();
        assert_eq!(a.1, 0.0);
        assert_eq!(b.1, 128.0);
        assert!(epipoles(&PoseSE3::identity(), &g).is_err());
    }

    #[test]
    fn zero_sets_agree_in_both_directions() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let pm = random_pose(&mut rng);
            let pn = random_pose(&mut rng);
            let e_mn = EssentialMatrix::new(&relative_pose(&pm, &pn)).unwrap();
            let e_nm = EssentialMatrix::new(&relative_pose(&pn, &pm)).unwrap();
            let a = (rng.random_range(0.0..512.0), rng.random_range(0.0..128.0));
            let b = (rng.random_range(0.0..512.0), rng.random_range(0.0..128.0));
            let r1 = residual(a, b, &e_mn, &g).unwrap();
            let r2 = residual(b, a, &e_nm, &g).unwrap();
            // both reduce to the same triple product
            assert_abs_diff_eq!(r1.abs(), r2.abs(), epsilon = 1e-12 * e_mn.baseline().norm());
        }
    }
}
