//! Triplane feature fields: three axis-aligned feature planes whose bilinear
//! samples are summed to give the feature of a 3D point.

mod io;
mod reference;

pub use io::{read_triplane, write_triplane, TRIPLANE_MAGIC, TRIPLANE_VERSION};
pub use reference::{
    attention_aggregate, cvha_reference_set, cvha_update, ica_reference_set, ica_update,
    uniform_depths, Anchor, IcaFrame, IcaReferences, ReferenceSet, SampleSource,
    DEFAULT_DEPTH_SAMPLES,
};

use std::fmt;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Fractional grid positions closer than this to an integer count as lying
/// on a cell boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneAxis {
    XY,
    XZ,
    YZ,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::XY, PlaneAxis::XZ, PlaneAxis::YZ];

    /// World axes (0 = X, 1 = Y, 2 = Z) spanned by the plane, in the order
    /// (columns, rows).
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneAxis::XY => (0, 1),
            PlaneAxis::XZ => (0, 2),
            PlaneAxis::YZ => (1, 2),
        }
    }

    /// The world axis orthogonal to the plane.
    pub fn normal_axis(self) -> usize {
        match self {
            PlaneAxis::XY => 2,
            PlaneAxis::XZ => 1,
            PlaneAxis::YZ => 0,
        }
    }

    /// Projection of a 3D point onto the plane's coordinates.
    pub fn project(self, x: &Vector3<f64>) -> [f64; 2] {
        let (a, b) = self.axes();
        [x[a], x[b]]
    }
}

impl fmt::Display for PlaneAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlaneAxis::XY => "XY",
            PlaneAxis::XZ => "XZ",
            PlaneAxis::YZ => "YZ",
        })
    }
}

/// Closed world interval `[min, max]` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min: f64,
    pub max: f64,
}

impl Extent {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max && min.is_finite() && max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "extent requires min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.min..=self.max).contains(&x)
    }

    pub fn len(&self) -> f64 {
        self.max - self.min
    }
}

/// World extents of a triplane along X, Y and Z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriplaneExtents {
    pub x: Extent,
    pub y: Extent,
    pub z: Extent,
}

impl TriplaneExtents {
    pub fn axis(&self, axis: usize) -> Extent {
        [self.x, self.y, self.z][axis]
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.x.contains(p.x) && self.y.contains(p.y) && self.z.contains(p.z)
    }
}

impl Default for TriplaneExtents {
    /// A 200 m x 200 m ground footprint centered at the origin, 0 to 50 m
    /// above ground.
    fn default() -> Self {
        Self {
            x: Extent {
                min: -100.0,
                max: 100.0,
            },
            y: Extent {
                min: -100.0,
                max: 100.0,
            },
            z: Extent {
                min: 0.0,
                max: 50.0,
            },
        }
    }
}

/// Shape of a freshly allocated triplane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriplaneConfig {
    pub extents: TriplaneExtents,
    /// Nodes per plane side.
    pub resolution: usize,
    pub channels: usize,
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        Self {
            extents: TriplaneExtents::default(),
            resolution: 256,
            channels: 32,
        }
    }
}

/// Corner weights and indices of one bilinear lookup.
#[derive(Debug, Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    fx: f64,
    fy: f64,
}

/// Analytic derivative of a plane sample with respect to its two world
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGradient {
    /// d feature / d first plane axis, per channel.
    pub d_first: Vec<f64>,
    /// d feature / d second plane axis, per channel.
    pub d_second: Vec<f64>,
    /// The point lies on a cell edge, where the derivative is one-sided.
    pub on_boundary: bool,
}

/// A feature grid spanning two world axes. Grid nodes sit on the extents'
/// boundaries: column `i` is at `min + i * len / (cols - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane {
    axis: PlaneAxis,
    features: FeatureGrid,
    first: Extent,
    second: Extent,
}

impl FeaturePlane {
    pub fn new(
        axis: PlaneAxis,
        features: FeatureGrid,
        first: Extent,
        second: Extent,
    ) -> Result<Self> {
        Extent::new(first.min, first.max)?;
        Extent::new(second.min, second.max)?;
        if features.rows() < 2 || features.cols() < 2 || features.channels() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{axis} plane needs at least 2x2 nodes and one channel, got {}x{}x{}",
                features.rows(),
                features.cols(),
                features.channels()
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{axis} plane has non-finite features"
            )));
        }
        Ok(Self {
            axis,
            features,
            first,
            second,
        })
    }

    pub fn axis(&self) -> PlaneAxis {
        self.axis
    }

    pub fn features(&self) -> &FeatureGrid {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.channels()
    }

    /// Extents of the (column, row) axes.
    pub fn extents(&self) -> (Extent, Extent) {
        (self.first, self.second)
    }

    /// World coordinates of node `(row, col)`.
    pub fn node_coords(&self, row: usize, col: usize) -> [f64; 2] {
        let a = self.first.min + col as f64 * self.first.len() / (self.features.cols() - 1) as f64;
        let b =
            self.second.min + row as f64 * self.second.len() / (self.features.rows() - 1) as f64;
        [a, b]
    }

    /// Continuous grid coordinates `(col, row)` of a world point.
    pub fn to_grid(&self, p: [f64; 2]) -> (f64, f64) {
        let gx = (p[0] - self.first.min) / self.first.len() * (self.features.cols() - 1) as f64;
        let gy = (p[1] - self.second.min) / self.second.len() * (self.features.rows() - 1) as f64;
        (gx, gy)
    }

    fn cell(&self, p: [f64; 2]) -> Result<Cell> {
        if !(self.first.contains(p[0]) && self.second.contains(p[1])) {
            return Err(Error::OutOfExtent {
                plane: self.axis,
                a: p[0],
                b: p[1],
            });
        }
        let (gx, gy) = self.to_grid(p);
        let col = (gx.floor() as usize).min(self.features.cols() - 2);
        let row = (gy.floor() as usize).min(self.features.rows() - 2);
        Ok(Cell {
            row,
            col,
            fx: gx - col as f64,
            fy: gy - row as f64,
        })
    }

    /// Adds `weight * sample(p)` to `out`.
    pub fn accumulate(&self, p: [f64; 2], weight: f64, out: &mut [f64]) -> Result<()> {
        let Cell { row, col, fx, fy } = self.cell(p)?;
        let f = &self.features;
        let corners = [
            (f.at(row, col), (1.0 - fx) * (1.0 - fy)),
            (f.at(row, col + 1), fx * (1.0 - fy)),
            (f.at(row + 1, col), (1.0 - fx) * fy),
            (f.at(row + 1, col + 1), fx * fy),
        ];
        for (feat, w) in corners {
            let w = w * weight;
            for (o, v) in out.iter_mut().zip(feat) {
                *o += w * v;
            }
        }
        Ok(())
    }

    /// Bilinearly interpolated feature at world coordinates `p`.
    pub fn sample(&self, p: [f64; 2]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels()];
        self.accumulate(p, 1.0, &mut out)?;
        Ok(out)
    }

    /// Derivative of [`FeaturePlane::sample`] with respect to `p`.
    pub fn gradient(&self, p: [f64; 2]) -> Result<PlaneGradient> {
        let Cell { row, col, fx, fy } = self.cell(p)?;
        let f = &self.features;
        let sx = (f.cols() - 1) as f64 / self.first.len();
        let sy = (f.rows() - 1) as f64 / self.second.len();
        let (f00, f01, f10, f11) = (
            f.at(row, col),
            f.at(row, col + 1),
            f.at(row + 1, col),
            f.at(row + 1, col + 1),
        );
        let c = self.channels();
        let mut d_first = Vec::with_capacity(c);
        let mut d_second = Vec::with_capacity(c);
        for ch in 0..c {
            d_first.push(((1.0 - fy) * (f01[ch] - f00[ch]) + fy * (f11[ch] - f10[ch])) * sx);
            d_second.push(((1.0 - fx) * (f10[ch] - f00[ch]) + fx * (f11[ch] - f01[ch])) * sy);
        }
        let near_edge = |t: f64| !(BOUNDARY_TOL..=1.0 - BOUNDARY_TOL).contains(&t);
        Ok(PlaneGradient {
            d_first,
            d_second,
            on_boundary: near_edge(fx) || near_edge(fy),
        })
    }
}

/// Free-function form of [`FeaturePlane::sample`].
pub fn bilinear_sample(plane: &FeaturePlane, p: [f64; 2]) -> Result<Vec<f64>> {
    plane.sample(p)
}

/// Free-function form of [`FeaturePlane::gradient`].
pub fn bilinear_grad(plane: &FeaturePlane, p: [f64; 2]) -> Result<PlaneGradient> {
    plane.gradient(p)
}

/// Value and spatial Jacobian of a triplane sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneGradient {
    pub value: Vec<f64>,
    /// `jacobian[c] = d value[c] / d (x, y, z)`.
    pub jacobian: Vec<[f64; 3]>,
    pub on_boundary: bool,
}

/// Three orthogonal feature planes sharing a channel count and consistent
/// extents on shared axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplane {
    xy: FeaturePlane,
    xz: FeaturePlane,
    yz: FeaturePlane,
}

impl Triplane {
    pub fn new(xy: FeaturePlane, xz: FeaturePlane, yz: FeaturePlane) -> Result<Self> {
        if xy.axis != PlaneAxis::XY || xz.axis != PlaneAxis::XZ || yz.axis != PlaneAxis::YZ {
            return Err(Error::ShapeMismatch(
                "planes passed in the wrong order".into(),
            ));
        }
        let c = xy.channels();
        if xz.channels() != c || yz.channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "channel counts differ: {} / {} / {}",
                c,
                xz.channels(),
                yz.channels()
            )));
        }
        if xy.first != xz.first || xy.second != yz.first || xz.second != yz.second {
            return Err(Error::ShapeMismatch(
                "planes disagree on a shared axis extent".into(),
            ));
        }
        Ok(Self { xy, xz, yz })
    }

    /// Builds a triplane by evaluating `f(axis, row, col, channel)`.
    pub fn from_fn(
        config: &TriplaneConfig,
        mut f: impl FnMut(PlaneAxis, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let n = config.resolution;
        let e = config.extents;
        let mut plane = |axis: PlaneAxis| {
            let (a, b) = axis.axes();
            let grid = FeatureGrid::from_fn(n, n, config.channels, |r, c, ch| f(axis, r, c, ch));
            FeaturePlane::new(axis, grid, e.axis(a), e.axis(b))
        };
        Triplane::new(
            plane(PlaneAxis::XY)?,
            plane(PlaneAxis::XZ)?,
            plane(PlaneAxis::YZ)?,
        )
    }

    pub fn zeros(config: &TriplaneConfig) -> Result<Self> {
        Self::from_fn(config, |_, _, _, _| 0.0)
    }

    pub fn plane(&self, axis: PlaneAxis) -> &FeaturePlane {
        match axis {
            PlaneAxis::XY => &self.xy,
            PlaneAxis::XZ => &self.xz,
            PlaneAxis::YZ => &self.yz,
        }
    }

    pub fn channels(&self) -> usize {
        self.xy.channels()
    }

    pub fn extents(&self) -> TriplaneExtents {
        TriplaneExtents {
            x: self.xy.first,
            y: self.xy.second,
            z: self.xz.second,
        }
    }

    /// Returns a copy with one plane replaced.
    pub fn with_plane(&self, plane: FeaturePlane) -> Result<Self> {
        let mut out = self.clone();
        match plane.axis {
            PlaneAxis::XY => out.xy = plane,
            PlaneAxis::XZ => out.xz = plane,
            PlaneAxis::YZ => out.yz = plane,
        }
        Triplane::new(out.xy, out.xz, out.yz)
    }

    /// Adds `weight * sample_3d(x)` to `out`.
    pub fn accumulate(&self, x: &Vector3<f64>, weight: f64, out: &mut [f64]) -> Result<()> {
        for axis in PlaneAxis::ALL {
            self.plane(axis).accumulate(axis.project(x), weight, out)?;
        }
        Ok(())
    }

    /// Feature of a 3D point: the element-wise sum of its three plane samples.
    pub fn sample(&self, x: &Vector3<f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels()];
        self.accumulate(x, 1.0, &mut out)?;
        Ok(out)
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Result<TriplaneGradient> {
        let c = self.channels();
        let mut value = vec![0.0; c];
        let mut jacobian = vec![[0.0; 3]; c];
        let mut on_boundary = false;
        for axis in PlaneAxis::ALL {
            let plane = self.plane(axis);
            let p = axis.project(x);
            plane.accumulate(p, 1.0, &mut value)?;
            let g = plane.gradient(p)?;
            on_boundary |= g.on_boundary;
            let (a, b) = axis.axes();
            for ch in 0..c {
                jacobian[ch][a] += g.d_first[ch];
                jacobian[ch][b] += g.d_second[ch];
            }
        }
        Ok(TriplaneGradient {
            value,
            jacobian,
            on_boundary,
        })
    }

    /// Plane-wise sum of two triplanes with identical layout.
    pub fn add(&self, other: &Triplane) -> Result<Triplane> {
        let sum = |a: &FeaturePlane, b: &FeaturePlane| -> Result<FeaturePlane> {
            if a.first != b.first || a.second != b.second {
                return Err(Error::ShapeMismatch(format!("{} extents differ", a.axis)));
            }
            FeaturePlane::new(a.axis, a.features.add(&b.features)?, a.first, a.second)
        };
        Triplane::new(
            sum(&self.xy, &other.xy)?,
            sum(&self.xz, &other.xz)?,
            sum(&self.yz, &other.yz)?,
        )
    }
}

/// Free-function form of [`Triplane::sample`].
pub fn sample_3d(tp: &Triplane, x: &Vector3<f64>) -> Result<Vec<f64>> {
    tp.sample(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config(channels: usize) -> TriplaneConfig {
        TriplaneConfig {
            extents: TriplaneExtents {
                x: Extent::new(-4.0, 4.0).unwrap(),
                y: Extent::new(-2.0, 6.0).unwrap(),
                z: Extent::new(0.0, 3.0).unwrap(),
            },
            resolution: 5,
            channels,
        }
    }

    fn plane_with(f: impl Fn(usize, usize, usize) -> f64) -> FeaturePlane {
        FeaturePlane::new(
            PlaneAxis::XY,
            FeatureGrid::from_fn(4, 5, 2, f),
            Extent::new(0.0, 8.0).unwrap(),
            Extent::new(0.0, 3.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn node_samples_are_exact() {
        let p = plane_with(|r, c, ch| (r * 10 + c) as f64 + 0.5 * ch as f64);
        for r in 0..4 {
            for c in 0..5 {
                let s = p.sample(p.node_coords(r, c)).unwrap();
                assert_eq!(s, p.features().at(r, c));
            }
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let p = plane_with(|r, c, ch| ((r * 7 + c * 3 + ch) % 5) as f64);
        let s = p.sample([3.0, 1.5]).unwrap();
        let f = p.features();
        for ch in 0..2 {
            let mean = (f.at(1, 1)[ch] + f.at(1, 2)[ch] + f.at(2, 1)[ch] + f.at(2, 2)[ch]) / 4.0;
            assert_abs_diff_eq!(s[ch], mean, epsilon = 1e-15);
        }
    }

    #[test]
    fn out_of_extent_is_an_error() {
        let p = plane_with(|_, _, _| 1.0);
        assert!(matches!(
            p.sample([8.0001, 1.0]),
            Err(Error::OutOfExtent {
                plane: PlaneAxis::XY,
                ..
            })
        ));
        assert!(p.sample([8.0, 3.0]).is_ok());
    }

    #[test]
    fn gradient_of_linear_plane_is_slope() {
        // feature = 2 * x - 0.5 * y on nodes: x = 2c, y = r
        let p = plane_with(|r, c, _| 2.0 * (2 * c) as f64 - 0.5 * r as f64);
        let g = p.gradient([2.7, 1.3]).unwrap();
        assert_abs_diff_eq!(g.d_first[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.d_second[0], -0.5, epsilon = 1e-14);
        assert!(!g.on_boundary);
        assert!(p.gradient([2.0, 1.3]).unwrap().on_boundary);
        let flat = plane_with(|_, _, _| 3.0);
        assert_eq!(flat.gradient([1.1, 2.2]).unwrap().d_first, vec![0.0, 0.0]);
    }

    #[test]
    fn triplane_sums_planes() {
        let cfg = small_config(3);
        let tp = Triplane::zeros(&cfg).unwrap();
        assert_eq!(
            tp.sample(&Vector3::new(0.3, 1.0, 2.0)).unwrap(),
            vec![0.0; 3]
        );
        let only_xy = Triplane::from_fn(&cfg, |axis, _, _, ch| {
            if axis == PlaneAxis::XY {
                ch as f64 + 1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let s = only_xy.sample(&Vector3::new(-1.0, 5.9, 0.1)).unwrap();
        assert_abs_diff_eq!(s.as_slice(), [1.0, 2.0, 3.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn triplane_reports_offending_plane() {
        let tp = Triplane::zeros(&small_config(1)).unwrap();
        assert!(matches!(
            tp.sample(&Vector3::new(0.0, 0.0, 3.5)),
            Err(Error::OutOfExtent {
                plane: PlaneAxis::XZ,
                ..
            })
        ));
        assert!(matches!(
            tp.sample(&Vector3::new(0.0, -2.5, 1.0)),
            Err(Error::OutOfExtent {
                plane: PlaneAxis::XY,
                ..
            })
        ));
    }

    #[test]
    fn mismatched_shared_axes_rejected() {
        let cfg = small_config(1);
        let tp = Triplane::zeros(&cfg).unwrap();
        let bad = FeaturePlane::new(
            PlaneAxis::XZ,
            FeatureGrid::zeros(5, 5, 1),
            Extent::new(-5.0, 4.0).unwrap(),
            cfg.extents.z,
        )
        .unwrap();
        assert!(tp.with_plane(bad).is_err());
    }

    #[test]
    fn shared_axis_grid_maps_agree() {
        let tp = Triplane::zeros(&small_config(1)).unwrap();
        for &x in &[-4.0, -1.3, 0.0, 2.2, 4.0] {
            let a = tp.plane(PlaneAxis::XY).to_grid([x, 0.0]).0;
            let b = tp.plane(PlaneAxis::XZ).to_grid([x, 0.0]).0;
            assert_eq!(a, b);
        }
    }
}
