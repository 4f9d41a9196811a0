//! Reference sets gathered for a triplane point: samples from the two
//! orthogonal planes along the missing axis, or from earlier panoramas
//! viewing the same vertical line.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{Extent, FeaturePlane, PlaneAxis, Triplane};
use crate::attention::{mat_vec, softmax_in_place, AttentionParams};
use crate::camera::{project_point, EquirectGrid, PoseSE3};
use crate::error::{Error, Result};
use crate::grid::{sample_equirect, FeatureGrid};

/// Default number of samples along the axis orthogonal to an anchor plane.
pub const DEFAULT_DEPTH_SAMPLES: usize = 8;

/// `count` evenly spaced cell-center positions inside `extent`.
pub fn uniform_depths(extent: Extent, count: usize) -> Vec<f64> {
    let step = extent.len() / count as f64;
    (0..count)
        .map(|i| extent.min + (i as f64 + 0.5) * step)
        .collect()
}

/// A point on one of the three planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub plane: PlaneAxis,
    pub coords: [f64; 2],
}

impl Anchor {
    pub fn new(plane: PlaneAxis, coords: [f64; 2]) -> Self {
        Self { plane, coords }
    }

    /// 3D point obtained by setting the plane's normal axis to `depth`.
    pub fn lift(&self, depth: f64) -> Vector3<f64> {
        let (a, b) = self.plane.axes();
        let mut p = Vector3::zeros();
        p[a] = self.coords[0];
        p[b] = self.coords[1];
        p[self.plane.normal_axis()] = depth;
        p
    }
}

/// Where a gathered feature came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleSource {
    Plane { plane: PlaneAxis, coords: [f64; 2] },
    Image { frame: usize, u: f64, v: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    anchor: Anchor,
    entries: Vec<(SampleSource, Vec<f64>)>,
}

impl ReferenceSet {
    pub fn anchor(&self) -> &Anchor {
        &self.anchor
    }

    pub fn entries(&self) -> &[(SampleSource, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|(_, f)| f.as_slice())
    }
}

fn plane_sample(
    tp: &Triplane,
    plane: PlaneAxis,
    coords: [f64; 2],
) -> Result<(SampleSource, Vec<f64>)> {
    Ok((
        SampleSource::Plane { plane, coords },
        tp.plane(plane).sample(coords)?,
    ))
}

/// Anchor feature followed by samples of the two other planes along the
/// anchor's normal axis.
///
/// For an XY anchor `(x, y)` and depths `z_i` the set is
/// `XY(x, y)`, then `YZ(y, z_i)` for every `i`, then `XZ(x, z_i)`. XZ anchors
/// sample `XY(x, y_i)` then `YZ(y_i, z)`; YZ anchors sample `XY(x_i, y)` then
/// `XZ(x_i, z)`.
pub fn cvha_reference_set(tp: &Triplane, anchor: &Anchor, depths: &[f64]) -> Result<ReferenceSet> {
    let mut entries = Vec::with_capacity(1 + 2 * depths.len());
    entries.push(plane_sample(tp, anchor.plane, anchor.coords)?);
    let (first, second) = match anchor.plane {
        PlaneAxis::XY => (PlaneAxis::YZ, PlaneAxis::XZ),
        PlaneAxis::XZ => (PlaneAxis::XY, PlaneAxis::YZ),
        PlaneAxis::YZ => (PlaneAxis::XY, PlaneAxis::XZ),
    };
    for other in [first, second] {
        for &d in depths {
            let p = anchor.lift(d);
            entries.push(plane_sample(tp, other, other.project(&p))?);
        }
    }
    Ok(ReferenceSet {
        anchor: *anchor,
        entries,
    })
}

/// A previously generated panorama: its feature map and the world-to-camera
/// transform of its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaFrame {
    pub features: FeatureGrid,
    pub world_to_camera: PoseSE3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcaReferences {
    pub set: ReferenceSet,
    /// `(depth index, frame index)` pairs skipped because the 3D sample sat
    /// on that frame's camera center.
    pub skipped: Vec<(usize, usize)>,
}

/// Features of earlier panoramas at the pixels where the anchor's vertical
/// samples project: for every depth (outer) and frame (inner), the frame's
/// feature map sampled bilinearly at `project_point(anchor.lift(depth))`.
pub fn ica_reference_set(
    tp: &Triplane,
    anchor: &Anchor,
    depths: &[f64],
    frames: &[IcaFrame],
    grid: &EquirectGrid,
) -> Result<IcaReferences> {
    if frames.is_empty() {
        return Err(Error::InvalidConfig("ICA needs at least one frame".into()));
    }
    tp.plane(anchor.plane).sample(anchor.coords)?;
    for f in frames {
        if f.features.cols() != grid.width() || f.features.rows() != grid.height() {
            return Err(Error::ShapeMismatch(format!(
                "frame features are {}x{}, grid is {grid}",
                f.features.cols(),
                f.features.rows()
            )));
        }
        if f.features.channels() != tp.channels() {
            return Err(Error::ShapeMismatch(format!(
                "frame features have {} channels, triplane has {}",
                f.features.channels(),
                tp.channels()
            )));
        }
    }
    let mut entries = Vec::with_capacity(depths.len() * frames.len());
    let mut skipped = Vec::new();
    for (di, &d) in depths.iter().enumerate() {
        let p = anchor.lift(d);
        for (fi, f) in frames.iter().enumerate() {
            match project_point(&p, &f.world_to_camera, grid) {
                Ok((u, v)) => entries.push((
                    SampleSource::Image { frame: fi, u, v },
                    sample_equirect(&f.features, u, v),
                )),
                Err(Error::DegenerateProjection) => skipped.push((di, fi)),
                Err(e) => return Err(e),
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidConfig(
            "ICA reference set is empty (no depths or every sample skipped)".into(),
        ));
    }
    Ok(IcaReferences {
        set: ReferenceSet {
            anchor: *anchor,
            entries,
        },
        skipped,
    })
}

/// Single-query scaled dot-product attention over a reference set.
pub fn attention_aggregate(
    query: &[f64],
    refs: &ReferenceSet,
    params: &AttentionParams,
) -> Result<Vec<f64>> {
    let c = params.channels();
    if query.len() != c || refs.features().any(|f| f.len() != c) {
        return Err(Error::ShapeMismatch(format!(
            "query/reference features must have {c} channels"
        )));
    }
    if refs.is_empty() {
        return Err(Error::InvalidConfig("empty reference set".into()));
    }
    let mut q = vec![0.0; c];
    mat_vec(params.wq(), query, &mut q);
    let inv_sqrt_d = 1.0 / params.scale().sqrt();
    let mut k = vec![0.0; c];
    let mut scores: Vec<f64> = refs
        .features()
        .map(|f| {
            mat_vec(params.wk(), f, &mut k);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d
        })
        .collect();
    softmax_in_place(&mut scores);
    let mut out = vec![0.0; c];
    let mut v = vec![0.0; c];
    for (w, f) in scores.iter().zip(refs.features()) {
        mat_vec(params.wv(), f, &mut v);
        for (o, x) in out.iter_mut().zip(&v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Rebuilds one plane node by node from `f(anchor, current feature)`.
fn update_plane(
    tp: &Triplane,
    axis: PlaneAxis,
    f: impl Fn(&Anchor, &[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<Triplane> {
    let plane = tp.plane(axis);
    let grid = plane.features();
    let (rows, cols, c) = (grid.rows(), grid.cols(), grid.channels());
    let new_rows: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut row = Vec::with_capacity(cols * c);
            for col in 0..cols {
                let anchor = Anchor::new(axis, plane.node_coords(r, col));
                row.extend(f(&anchor, grid.at(r, col))?);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let data = new_rows.into_iter().flatten().collect();
    let (first, second) = plane.extents();
    let updated = FeaturePlane::new(
        axis,
        FeatureGrid::from_vec(rows, cols, c, data)?,
        first,
        second,
    )?;
    tp.with_plane(updated)
}

/// New triplane whose `axis` plane holds, at every node, the attention of
/// the node feature over its cross-plane reference set. The input is left
/// untouched.
pub fn cvha_update(
    tp: &Triplane,
    axis: PlaneAxis,
    depths: &[f64],
    params: &AttentionParams,
) -> Result<Triplane> {
    update_plane(tp, axis, |anchor, feat| {
        let refs = cvha_reference_set(tp, anchor, depths)?;
        attention_aggregate(feat, &refs, params)
    })
}

/// As [`cvha_update`] with image reference sets from earlier frames.
pub fn ica_update(
    tp: &Triplane,
    axis: PlaneAxis,
    depths: &[f64],
    frames: &[IcaFrame],
    grid: &EquirectGrid,
    params: &AttentionParams,
) -> Result<Triplane> {
    update_plane(tp, axis, |anchor, feat| {
        let refs = ica_reference_set(tp, anchor, depths, frames, grid)?;
        attention_aggregate(feat, &refs.set, params)
    })
}
