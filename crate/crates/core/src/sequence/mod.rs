//! Multi-frame topology: which frames attend which, the epipolar masks of
//! every scheduled pair, and interframe attention over a whole trajectory.

mod trajectory;

pub use trajectory::{Trajectory, WorldRect, DEFAULT_MIN_SPACING};

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::attention::{
    masked_attention_projected, AttentionParams, AttentionStats, CandidateLists, PairCount,
    ProjectedFrame,
};
use crate::camera::EquirectGrid;
use crate::epipolar::{relative_pose, EpipolarMasker, EssentialMatrix, MaskConfig, PairMasks};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Attended frames (by position in the trajectory) of every frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    attends: Vec<Vec<usize>>,
    window: Option<usize>,
}

impl Schedule {
    /// Arbitrary attendance lists. Self-attendance and out-of-range entries
    /// are rejected.
    pub fn new(attends: Vec<Vec<usize>>) -> Result<Self> {
        let n = attends.len();
        for (i, a) in attends.iter().enumerate() {
            if a.iter().any(|&j| j == i || j >= n) {
                return Err(Error::InvalidConfig(format!(
                    "frame {i} has an invalid attendance list {a:?}"
                )));
            }
        }
        Ok(Self {
            attends,
            window: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.attends.len()
    }

    pub fn attends(&self, frame: usize) -> &[usize] {
        &self.attends[frame]
    }

    pub fn as_slice(&self) -> &[Vec<usize>] {
        &self.attends
    }

    /// Window size of a sparse schedule.
    pub fn window(&self) -> Option<usize> {
        self.window
    }

    /// Directed (query frame, attended frame) pairs.
    pub fn pair_count(&self) -> usize {
        self.attends.iter().map(Vec::len).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.attends
            .iter()
            .enumerate()
            .flat_map(|(m, a)| a.iter().map(move |&n| (m, n)))
    }

    /// Every frame attends only strictly earlier frames.
    pub fn is_causal(&self) -> bool {
        self.pairs().all(|(m, n)| n < m)
    }
}

/// Every frame attends every other frame.
pub fn dense_schedule(frames: usize) -> Schedule {
    Schedule {
        attends: (0..frames)
            .map(|i| (0..frames).filter(|&j| j != i).collect())
            .collect(),
        window: None,
    }
}

/// Frame `i` attends `i - 1, ..., i - w`, nearest first, clipped at frame 0.
pub fn sparse_schedule(frames: usize, window: usize) -> Result<Schedule> {
    if window == 0 {
        return Err(Error::InvalidConfig(
            "sparse window must be at least 1".into(),
        ));
    }
    Ok(Schedule {
        attends: (0..frames)
            .map(|i| (i.saturating_sub(window)..i).rev().collect())
            .collect(),
        window: Some(window),
    })
}

/// `N (N - 1)`.
pub fn dense_pair_count(frames: usize) -> usize {
    frames * frames.saturating_sub(1)
}

/// `w N - w (w + 1) / 2` once `N >= w`; `N (N - 1) / 2` below that.
pub fn sparse_pair_count(frames: usize, window: usize) -> usize {
    if frames >= window {
        window * frames - window * (window + 1) / 2
    } else {
        frames * frames.saturating_sub(1) / 2
    }
}

/// Grid of the `level`-th halving of `grid`.
pub fn downscale_grid(grid: &EquirectGrid, level: u32) -> Result<EquirectGrid> {
    let f = 1usize
        .checked_shl(level)
        .filter(|f| *f <= grid.width())
        .ok_or(Error::NotDivisible {
            width: grid.width(),
            height: grid.height(),
            level,
        })?;
    if !grid.width().is_multiple_of(f) || !grid.height().is_multiple_of(f) {
        return Err(Error::NotDivisible {
            width: grid.width(),
            height: grid.height(),
            level,
        });
    }
    EquirectGrid::new(grid.width() / f, grid.height() / f)
}

/// Masks of every scheduled pair, keyed by trajectory positions `(m, n)`.
/// Pairs with bit-identical relative poses share one mask set.
#[derive(Debug, Clone)]
pub struct FrameMasks {
    grid: EquirectGrid,
    pairs: Vec<((usize, usize), Arc<PairMasks>)>,
    unique: usize,
}

impl FrameMasks {
    pub fn grid(&self) -> &EquirectGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of mask sets actually generated.
    pub fn unique_builds(&self) -> usize {
        self.unique
    }

    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), &PairMasks)> + '_ {
        self.pairs.iter().map(|(k, v)| (*k, v.as_ref()))
    }

    pub fn get(&self, m: usize, n: usize) -> Option<&PairMasks> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == (m, n))
            .map(|(_, v)| v.as_ref())
    }

    /// Candidate lists of frame `m`'s queries over the concatenated pixels of
    /// `attends`, in that order.
    pub fn candidate_lists(&self, m: usize, attends: &[usize]) -> Result<CandidateLists> {
        let hw = self.grid.pixel_count();
        let sets = attends
            .iter()
            .map(|&n| {
                self.get(m, n).ok_or_else(|| {
                    Error::InvalidConfig(format!("no masks for frame pair ({m}, {n})"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut lists = CandidateLists::new();
        for q in 0..hw {
            lists.push_row(std::iter::empty());
            for (j, s) in sets.iter().enumerate() {
                let off = (j * hw) as u32;
                lists.extend_last(s.candidates(q).iter().map(|&k| k + off));
            }
        }
        Ok(lists)
    }

    /// Candidate totals per query frame, as consumed by the cost model.
    pub fn pair_counts(&self, schedule: &Schedule) -> Result<Vec<PairCount>> {
        let hw = self.grid.pixel_count();
        (0..schedule.frames())
            .map(|m| {
                let a = schedule.attends(m);
                let sets = a
                    .iter()
                    .map(|&n| {
                        self.get(m, n).ok_or_else(|| {
                            Error::InvalidConfig(format!("no masks for frame pair ({m}, {n})"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut count = PairCount::default();
                for q in 0..hw {
                    let per: u64 = sets.iter().map(|s| s.candidates(q).len() as u64).sum();
                    count.total += per;
                    count.max_per_query = count.max_per_query.max(per);
                    count.empty_queries += (per == 0) as u64;
                }
                Ok(count)
            })
            .collect()
    }
}

fn pose_key(p: &crate::camera::PoseSE3) -> [u64; 12] {
    let mut k = [0u64; 12];
    for (slot, v) in k
        .iter_mut()
        .zip(p.rotation.iter().chain(p.translation.iter()))
    {
        *slot = v.to_bits();
    }
    k
}

/// Generates the epipolar masks of every scheduled pair `m -> n`. A zero
/// baseline between a scheduled pair fails with the offending frame ids.
pub fn build_frame_masks(
    traj: &Trajectory,
    schedule: &Schedule,
    grid: &EquirectGrid,
    config: &MaskConfig,
) -> Result<FrameMasks> {
    if schedule.frames() != traj.len() {
        return Err(Error::ShapeMismatch(format!(
            "schedule covers {} frames, trajectory has {}",
            schedule.frames(),
            traj.len()
        )));
    }
    let masker = EpipolarMasker::new(*grid, *config)?;
    let poses: Vec<_> = traj.poses().iter().map(|p| p.to_se3()).collect();
    let ids = traj.ids();

    let mut keys = Vec::with_capacity(schedule.pair_count());
    let mut unique: Vec<EssentialMatrix> = Vec::new();
    let mut seen: HashMap<[u64; 12], usize> = HashMap::new();
    for (m, n) in schedule.pairs() {
        let rel = relative_pose(&poses[m], &poses[n]);
        let e = EssentialMatrix::between(&rel, ids[m], ids[n])?;
        let slot = *seen.entry(pose_key(&rel)).or_insert_with(|| {
            unique.push(e);
            unique.len() - 1
        });
        keys.push(((m, n), slot));
    }
    let built: Vec<Arc<PairMasks>> = unique
        .par_iter()
        .map(|e| PairMasks::build(&masker, e).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok(FrameMasks {
        grid: *grid,
        pairs: keys
            .into_iter()
            .map(|(k, slot)| (k, Arc::clone(&built[slot])))
            .collect(),
        unique: built.len(),
    })
}

/// Summary of the masks of one frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub query_frame: usize,
    pub key_frame: usize,
    pub queries: usize,
    pub total: usize,
    pub mean: f64,
    pub max: usize,
    /// `mean / (H W)`.
    pub sparsity: f64,
    /// Queries at an epipole, whose mask is the whole frame.
    pub full_queries: usize,
    pub empty_queries: usize,
}

impl PairStats {
    pub fn of(query_frame: usize, key_frame: usize, masks: &PairMasks) -> Self {
        let hw = masks.grid().pixel_count();
        Self {
            query_frame,
            key_frame,
            queries: masks.query_count(),
            total: masks.nnz(),
            mean: masks.mean_candidates(),
            max: masks.max_candidates(),
            sparsity: masks.mean_candidates() / hw as f64,
            full_queries: masks.full_count(),
            empty_queries: masks.empty_count(),
        }
    }
}

/// Per-pair statistics in schedule order, labelled with frame ids.
pub fn pair_stats(traj: &Trajectory, masks: &FrameMasks) -> Vec<PairStats> {
    masks
        .pairs()
        .map(|((m, n), p)| PairStats::of(traj.ids()[m], traj.ids()[n], p))
        .collect()
}

/// Which keys each query sees in interframe attention.
#[derive(Debug, Clone, Copy)]
pub enum KeySelection<'a> {
    /// Every pixel of every attended frame.
    Full,
    Epipolar(&'a FrameMasks),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterframeOutput {
    pub features: Vec<FeatureGrid>,
    pub stats: AttentionStats,
    pub per_frame: Vec<AttentionStats>,
}

/// Cross-frame attention where frame `m` attends the frames
/// `schedule.attends(m)`. Each frame is projected once; frames with nothing
/// to attend take the `W^V` self fallback.
pub fn interframe_attention(
    frames: &[FeatureGrid],
    schedule: &Schedule,
    keys: KeySelection<'_>,
    params: &AttentionParams,
) -> Result<InterframeOutput> {
    if frames.len() != schedule.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps for a {}-frame schedule",
            frames.len(),
            schedule.frames()
        )));
    }
    let Some(first) = frames.first() else {
        return Ok(InterframeOutput {
            features: Vec::new(),
            stats: AttentionStats::default(),
            per_frame: Vec::new(),
        });
    };
    if let Some(f) = frames.iter().find(|f| {
        (f.rows(), f.cols(), f.channels()) != (first.rows(), first.cols(), first.channels())
    }) {
        return Err(Error::ShapeMismatch(format!(
            "frame shapes differ: {}x{}x{} vs {}x{}x{}",
            f.rows(),
            f.cols(),
            f.channels(),
            first.rows(),
            first.cols(),
            first.channels()
        )));
    }
    if let KeySelection::Epipolar(m) = keys {
        let g = m.grid();
        if (g.height(), g.width()) != (first.rows(), first.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "masks are for a {g} grid, features are {}x{}",
                first.cols(),
                first.rows()
            )));
        }
    }
    let hw = first.len();
    let c = first.channels() as u64;
    let projected = frames
        .iter()
        .map(|f| ProjectedFrame::new(f, params))
        .collect::<Result<Vec<_>>>()?;

    let mut features = Vec::with_capacity(frames.len());
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut stats = AttentionStats::default();
    for m in 0..frames.len() {
        let attends = schedule.attends(m);
        let lists = match keys {
            KeySelection::Full => CandidateLists::full(hw, attends.len() * hw),
            KeySelection::Epipolar(masks) => masks.candidate_lists(m, attends)?,
        };
        let key_frames: Vec<&ProjectedFrame> = attends.iter().map(|&n| &projected[n]).collect();
        let (data, mut s) = masked_attention_projected(&projected[m], &key_frames, &lists, params)?;
        s.projection_macs = 3 * hw as u64 * c * c;
        stats.merge(&s);
        per_frame.push(s);
        features.push(FeatureGrid::from_vec(
            first.rows(),
            first.cols(),
            first.channels(),
            data,
        )?);
    }
    Ok(InterframeOutput {
        features,
        stats,
        per_frame,
    })
}
