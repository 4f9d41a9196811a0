use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;

use super::{crossing_from_components, ColumnCrossing, EssentialMatrix};
use crate::camera::{pixel_to_angles, EquirectGrid};
use crate::error::{Error, Result};

/// How the continuous epipolar curve is discretized into candidate pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Nearest row to the curve in every column, widened by
    /// `band_halfwidth` rows on each side.
    #[default]
    Band,
    /// Every pixel whose angular residual is at most `eps`.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub band_halfwidth: usize,
    pub eps: f64,
    pub mode: MaskMode,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            band_halfwidth: 1,
            eps: 1e-3,
            mode: MaskMode::Band,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Bound on the angular residual of every candidate the mask emits on
    /// `grid`. For band masks this is the sine of the band's angular
    /// half-height, `sin((b + 1/2) pi / H)`.
    pub fn residual_bound(&self, grid: &EquirectGrid) -> f64 {
        match self.mode {
            MaskMode::Band => band_residual_bound(self.band_halfwidth, grid.height()),
            MaskMode::Threshold => self.eps,
        }
    }
}

/// `sin((b + 1/2) pi / H)`, saturating at 1.
pub fn band_residual_bound(band_halfwidth: usize, height: usize) -> f64 {
    let half_angle = (band_halfwidth as f64 + 0.5) * PI / height as f64;
    half_angle.min(FRAC_PI_2).sin()
}

/// Candidate target pixels for one query pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarMask {
    query: (f64, f64),
    /// Flat target pixel indices, ordered by column then row.
    candidates: Vec<u32>,
    eps: f64,
    full: bool,
    width: usize,
}

impl EpipolarMask {
    pub fn query(&self) -> (f64, f64) {
        self.query
    }

    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    /// Continuous coordinates of the candidate pixel centers.
    pub fn candidate_coords(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let w = self.width;
        self.candidates
            .iter()
            .map(move |&i| ((i as usize % w) as f64 + 0.5, (i as usize / w) as f64 + 0.5))
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Angular-residual bound satisfied by every candidate.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// True when the query is an epipole and every target pixel is listed.
    pub fn is_full(&self) -> bool {
        self.full
    }
}

/// Outcome of rasterizing one query into a caller-supplied buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Curve,
    /// Query at an epipole: all pixels were emitted.
    Full,
}

/// Reusable per-grid lookup tables for generating masks of many queries.
#[derive(Debug, Clone)]
pub struct EpipolarMasker {
    grid: EquirectGrid,
    config: MaskConfig,
    /// `(sin, cos)` of each column center's yaw.
    col_trig: Vec<(f64, f64)>,
    /// `(sin, cos)` of each row center's pitch.
    row_trig: Vec<(f64, f64)>,
}

impl EpipolarMasker {
    pub fn new(grid: EquirectGrid, config: MaskConfig) -> Result<Self> {
        config.validate()?;
        let w = grid.width() as f64;
        let h = grid.height() as f64;
        let col_trig = (0..grid.width())
            .map(|c| ((c as f64 + 0.5 - w / 2.0) / w * TAU).sin_cos())
            .collect();
        let row_trig = (0..grid.height())
            .map(|r| ((h / 2.0 - (r as f64 + 0.5)) / h * PI).sin_cos())
            .collect();
        Ok(Self {
            grid,
            config,
            col_trig,
            row_trig,
        })
    }

    pub fn grid(&self) -> &EquirectGrid {
        &self.grid
    }

    pub fn config(&self) -> &MaskConfig {
        &self.config
    }

    pub fn residual_bound(&self) -> f64 {
        self.config.residual_bound(&self.grid)
    }

    /// Mask of the query pixel `px_m` under `e`.
    pub fn mask(&self, e: &EssentialMatrix, px_m: (f64, f64)) -> Result<EpipolarMask> {
        let d_m = pixel_to_angles(px_m.0, px_m.1, &self.grid)?.dir();
        let mut candidates = Vec::new();
        let kind = self.mask_direction_into(e, &d_m, &mut candidates);
        Ok(EpipolarMask {
            query: px_m,
            candidates,
            eps: self.residual_bound(),
            full: kind == MaskKind::Full,
            width: self.grid.width(),
        })
    }

    /// Appends the candidates of the query direction `d_m` to `out`.
    pub fn mask_direction_into(
        &self,
        e: &EssentialMatrix,
        d_m: &Vector3<f64>,
        out: &mut Vec<u32>,
    ) -> MaskKind {
        let Some(n) = e.unit_normal(d_m) else {
            let (w, h) = (self.grid.width(), self.grid.height());
            for col in 0..w {
                out.extend((0..h).map(|row| (row * w + col) as u32));
            }
            return MaskKind::Full;
        };
        match self.config.mode {
            MaskMode::Band => self.band_into(&n, out),
            MaskMode::Threshold => self.threshold_into(&n, out),
        }
        MaskKind::Curve
    }

    fn band_into(&self, n: &Vector3<f64>, out: &mut Vec<u32>) {
        let w = self.grid.width();
        let h = self.grid.height();
        let b = self.config.band_halfwidth;
        for col in 0..w {
            let (s, c) = self.col_trig[col];
            match crossing_from_components(n.x * c + n.y * s, n.z, h) {
                ColumnCrossing::At(v) => {
                    let nearest = (v.floor().max(0.0) as usize).min(h - 1);
                    let lo = nearest.saturating_sub(b);
                    let hi = (nearest + b).min(h - 1);
                    out.extend((lo..=hi).map(|row| (row * w + col) as u32));
                }
                ColumnCrossing::Whole => out.extend((0..h).map(|row| (row * w + col) as u32)),
                ColumnCrossing::Miss => {}
            }
        }
    }

    fn threshold_into(&self, n: &Vector3<f64>, out: &mut Vec<u32>) {
        let w = self.grid.width();
        let h = self.grid.height();
        let hf = h as f64;
        let eps = self.config.eps;
        let mut rows: Vec<usize> = Vec::with_capacity(h);
        for col in 0..w {
            let (s, c) = self.col_trig[col];
            // residual along the column: a cos(theta) + n_z sin(theta) = rho sin(theta + phi)
            let a = n.x * c + n.y * s;
            let rho = a.hypot(n.z);
            rows.clear();
            if rho <= eps {
                rows.extend(0..h);
            } else {
                let phi = a.atan2(n.z);
                let alpha = (eps / rho).asin();
                for m in -1..=1 {
                    let lo = (m as f64 * PI - phi - alpha).max(-FRAC_PI_2);
                    let hi = (m as f64 * PI - phi + alpha).min(FRAC_PI_2);
                    if lo > hi {
                        continue;
                    }
                    let r_lo = hf / 2.0 - 0.5 - hi * hf / PI;
                    let r_hi = hf / 2.0 - 0.5 - lo * hf / PI;
                    let first = (r_lo.floor() - 1.0).max(0.0) as usize;
                    let last = ((r_hi.ceil() + 1.0).max(0.0) as usize).min(h - 1);
                    rows.extend(first..=last);
                }
                rows.sort_unstable();
                rows.dedup();
            }
            for &row in &rows {
                let (sp, cp) = self.row_trig[row];
                let d = Vector3::new(cp * c, cp * s, sp);
                if d.dot(n).abs() <= eps {
                    out.push((row * w + col) as u32);
                }
            }
        }
    }
}

/// Builds the candidate mask of one query pixel.
pub fn epipolar_mask(
    px_m: (f64, f64),
    e: &EssentialMatrix,
    grid: &EquirectGrid,
    config: &MaskConfig,
) -> Result<EpipolarMask> {
    EpipolarMasker::new(*grid, *config)?.mask(e, px_m)
}

#[cfg(test)]
mod tests {
    use super::super::{angular_residual, relative_pose};
    use super::*;
    use crate::camera::{Pose4DoF, PoseSE3};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn translation(t: Vector3<f64>) -> PoseSE3 {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    fn random_rel(rng: &mut impl Rng) -> PoseSE3 {
        let mut p = || {
            Pose4DoF::new(
                Vector3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(0.5..3.0),
                ),
                rng.random_range(-PI..PI),
            )
            .to_se3()
        };
        relative_pose(&p(), &p())
    }

    #[test]
    fn rejects_non_positive_eps() {
        let g = EquirectGrid::new(32, 16).unwrap();
        let cfg = MaskConfig {
            eps: 0.0,
            ..Default::default()
        };
        assert!(EpipolarMasker::new(g, cfg).is_err());
    }

    #[test]
    fn horizon_band_zero_has_one_pixel_per_column() {
        let g = EquirectGrid::new(64, 16).unwrap();
        let e = EssentialMatrix::new(&translation(Vector3::y())).unwrap();
        let cfg = MaskConfig {
            band_halfwidth: 0,
            ..Default::default()
        };
        let m = epipolar_mask((32.0, 8.0), &e, &g, &cfg).unwrap();
        assert_eq!(m.len(), 64);
        assert!(!m.is_full());
        let us: Vec<f64> = m.candidate_coords().map(|p| p.0).collect();
        assert!(us.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn epipole_query_gives_full_mask() {
        let g = EquirectGrid::new(32, 16).unwrap();
        let e = EssentialMatrix::new(&translation(Vector3::x())).unwrap();
        let m = epipolar_mask((16.0, 8.0), &e, &g, &MaskConfig::default()).unwrap();
        assert!(m.is_full());
        assert_eq!(m.len(), 32 * 16);
    }

    #[test]
    fn band_size_bound_and_residual_bound() {
        let g = EquirectGrid::new(64, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for b in 0..3 {
            let cfg = MaskConfig {
                band_halfwidth: b,
                ..Default::default()
            };
            let masker = EpipolarMasker::new(g, cfg).unwrap();
            for _ in 0..30 {
                let e = EssentialMatrix::new(&random_rel(&mut rng)).unwrap();
                let q = (rng.random_range(0.0..64.0), rng.random_range(0.0..32.0));
                let m = masker.mask(&e, q).unwrap();
                assert!(m.len() <= 64 * (2 * b + 1));
                for p in m.candidate_coords() {
                    let r = angular_residual(q, p, &e, &g).unwrap().unwrap();
                    assert!(r.abs() <= m.eps() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn scaling_baseline_leaves_mask_unchanged() {
        let g = EquirectGrid::new(64, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for mode in [MaskMode::Band, MaskMode::Threshold] {
            let cfg = MaskConfig {
                mode,
                eps: 0.05,
                ..Default::default()
            };
            let masker = EpipolarMasker::new(g, cfg).unwrap();
            for _ in 0..20 {
                let rel = random_rel(&mut rng);
                let mut scaled = rel;
                scaled.translation *= 7.5;
                let e1 = EssentialMatrix::new(&rel).unwrap();
                let e2 = EssentialMatrix::new(&scaled).unwrap();
                let q = (rng.random_range(0.0..64.0), rng.random_range(0.0..32.0));
                assert_eq!(masker.mask(&e1, q).unwrap(), masker.mask(&e2, q).unwrap());
            }
        }
    }

    #[test]
    fn threshold_mask_matches_exhaustive_scan() {
        let g = EquirectGrid::new(32, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = MaskConfig {
            mode: MaskMode::Threshold,
            eps: 0.1,
            ..Default::default()
        };
        let masker = EpipolarMasker::new(g, cfg).unwrap();
        for _ in 0..40 {
            let e = EssentialMatrix::new(&random_rel(&mut rng)).unwrap();
            let q = (rng.random_range(0.0..32.0), rng.random_range(0.0..16.0));
            let mut got: Vec<u32> = masker.mask(&e, q).unwrap().candidates().to_vec();
            got.sort_unstable();
            let want: Vec<u32> = (0..g.pixel_count() as u32)
                .filter(|&i| {
                    let p = g.pixel_center(i as usize);
                    angular_residual(q, p, &e, &g).unwrap().unwrap().abs() <= 0.1
                })
                .collect();
            assert_eq!(got, want);
        }
    }
}
