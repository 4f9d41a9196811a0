//! Single-head scaled dot-product attention, dense and restricted to
//! per-query candidate lists, with operation counters.
//!
//! Every query is reduced sequentially in candidate order; queries run in
//! parallel but never share accumulators, so results are bit-identical for
//! any thread count.

mod cost;

pub use cost::{cost_model, CandidateModel, CostReport, PairCount, COST_CSV_HEADER};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Query, key and value projections plus the score temperature `d`
/// (scores are divided by `sqrt(d)`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    scale: f64,
}

impl AttentionParams {
    pub fn new(wq: DMatrix<f64>, wk: DMatrix<f64>, wv: DMatrix<f64>, scale: f64) -> Result<Self> {
        let c = wq.nrows();
        for (name, m) in [("W^Q", &wq), ("W^K", &wk), ("W^V", &wv)] {
            if m.nrows() != c || m.ncols() != c {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}x{}, expected {c}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self { wq, wk, wv, scale })
    }

    /// Identity projections with `d = C`.
    pub fn identity(channels: usize) -> Self {
        let i = DMatrix::identity(channels, channels);
        Self {
            wq: i.clone(),
            wk: i.clone(),
            wv: i,
            scale: channels as f64,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.nrows()
    }

    pub fn wq(&self) -> &DMatrix<f64> {
        &self.wq
    }

    pub fn wk(&self) -> &DMatrix<f64> {
        &self.wk
    }

    pub fn wv(&self) -> &DMatrix<f64> {
        &self.wv
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "features have {c} channels, projections expect {}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// `out = m * x` for a row-major matrix and a dense vector.
pub(crate) fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xv) in x.iter().enumerate() {
            acc += m[(r, c)] * xv;
        }
        *o = acc;
    }
}

/// Applies `m` to every row of a `rows x C` buffer.
fn project_rows(m: &DMatrix<f64>, data: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(c)
        .zip(data.par_chunks(c))
        .for_each(|(o, x)| mat_vec(m, x, o));
    out
}

/// Numerically stable softmax (max subtraction) in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// A frame's features after projection by `W^Q`, `W^K` and `W^V`.
#[derive(Debug, Clone)]
pub struct ProjectedFrame {
    channels: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl ProjectedFrame {
    pub fn new(features: &FeatureGrid, params: &AttentionParams) -> Result<Self> {
        let c = features.channels();
        params.check_channels(c)?;
        let data = features.data();
        Ok(Self {
            channels: c,
            q: project_rows(&params.wq, data, c),
            k: project_rows(&params.wk, data, c),
            v: project_rows(&params.wv, data, c),
        })
    }

    pub fn len(&self) -> usize {
        self.q.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    fn row(buf: &[f64], i: usize, c: usize) -> &[f64] {
        &buf[i * c..(i + 1) * c]
    }
}

/// Per-query candidate key lists in compressed-sparse-row form. Key indices
/// address the concatenation of all key frames passed alongside.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CandidateLists {
    row_ptr: Vec<usize>,
    keys: Vec<u32>,
}

impl CandidateLists {
    pub fn new() -> Self {
        Self {
            row_ptr: vec![0],
            keys: Vec::new(),
        }
    }

    pub fn from_rows<I, R>(rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = u32>,
    {
        let mut out = Self::new();
        for r in rows {
            out.push_row(r);
        }
        out
    }

    /// Every query sees all `key_count` keys.
    pub fn full(queries: usize, key_count: usize) -> Self {
        Self::from_rows((0..queries).map(|_| 0..key_count as u32))
    }

    pub fn push_row(&mut self, keys: impl IntoIterator<Item = u32>) {
        self.keys.extend(keys);
        self.row_ptr.push(self.keys.len());
    }

    /// Appends to the most recently pushed row.
    pub fn extend_last(&mut self, keys: impl IntoIterator<Item = u32>) {
        self.keys.extend(keys);
        *self.row_ptr.last_mut().expect("row_ptr is never empty") = self.keys.len();
    }

    pub fn queries(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.keys[self.row_ptr[q]..self.row_ptr[q + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

/// Counters gathered while running attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionStats {
    pub queries: u64,
    /// Query-key dot products evaluated.
    pub score_evals: u64,
    /// Number of softmax normalizations performed.
    pub softmax_count: u64,
    pub max_softmax: u64,
    /// Queries with no candidates that fell back to `W^V` of their own
    /// feature.
    pub empty_queries: u64,
    /// Largest score matrix one attention call would materialize.
    pub peak_score_buffer: u64,
    pub projection_macs: u64,
    pub score_macs: u64,
}

impl AttentionStats {
    pub fn merge(&mut self, other: &AttentionStats) {
        self.queries += other.queries;
        self.score_evals += other.score_evals;
        self.softmax_count += other.softmax_count;
        self.max_softmax = self.max_softmax.max(other.max_softmax);
        self.empty_queries += other.empty_queries;
        self.peak_score_buffer = self.peak_score_buffer.max(other.peak_score_buffer);
        self.projection_macs += other.projection_macs;
        self.score_macs += other.score_macs;
    }

    pub fn total_macs(&self) -> u64 {
        self.projection_macs + self.score_macs
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct QueryCounters {
    score_evals: u64,
    softmax: u64,
    empty: u64,
}

/// Scratch buffers reused across the queries handled by one worker.
#[derive(Debug, Default)]
struct Scratch {
    weights: Vec<f64>,
    rows: Vec<(usize, usize)>,
}

/// Attention of one query over `keys`; writes into `out` and returns the
/// counters.
#[allow(clippy::too_many_arguments)]
fn attend_one(
    q_idx: usize,
    queries: &ProjectedFrame,
    key_frames: &[&ProjectedFrame],
    offsets: &[usize],
    keys: &[u32],
    scale: f64,
    scratch: &mut Scratch,
    out: &mut [f64],
) -> Result<QueryCounters> {
    let c = queries.channels;
    let mut counters = QueryCounters::default();
    if keys.is_empty() {
        out.copy_from_slice(ProjectedFrame::row(&queries.v, q_idx, c));
        counters.empty = 1;
        return Ok(counters);
    }
    let q = ProjectedFrame::row(&queries.q, q_idx, c);
    let total = *offsets.last().unwrap();
    let Scratch { weights, rows } = scratch;
    rows.clear();
    // keys usually arrive grouped by frame, so a moving cursor avoids searching
    let mut f = 0;
    for &key in keys {
        let key = key as usize;
        if key >= total {
            return Err(Error::CandidateOutOfBounds {
                index: key,
                len: total,
            });
        }
        if key < offsets[f] || key >= offsets[f + 1] {
            f = offsets.partition_point(|&o| o <= key) - 1;
        }
        rows.push((f, (key - offsets[f]) * c));
    }
    let inv_sqrt_d = 1.0 / scale.sqrt();
    weights.clear();
    weights.extend(rows.iter().map(|&(f, at)| {
        let k = &key_frames[f].k[at..at + c];
        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d
    }));
    counters.score_evals = keys.len() as u64;
    softmax_in_place(weights);
    counters.softmax = 1;
    out.fill(0.0);
    for (&(f, at), &w) in rows.iter().zip(weights.iter()) {
        let v = &key_frames[f].v[at..at + c];
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(counters)
}

/// Attention of every query of `queries` over its candidate keys drawn from
/// the already-projected `key_frames`. Projection costs are not counted.
pub fn masked_attention_projected(
    queries: &ProjectedFrame,
    key_frames: &[&ProjectedFrame],
    candidates: &CandidateLists,
    params: &AttentionParams,
) -> Result<(Vec<f64>, AttentionStats)> {
    let c = queries.channels;
    let n = queries.len();
    if candidates.queries() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} candidate lists for {n} queries",
            candidates.queries()
        )));
    }
    if let Some(f) = key_frames.iter().find(|f| f.channels != c) {
        return Err(Error::ShapeMismatch(format!(
            "key frame has {} channels, queries have {c}",
            f.channels
        )));
    }
    let mut offsets = Vec::with_capacity(key_frames.len() + 1);
    offsets.push(0);
    for f in key_frames {
        offsets.push(offsets.last().unwrap() + f.len());
    }

    let mut output = vec![0.0; n * c];
    let counters: Vec<QueryCounters> = output
        .par_chunks_mut(c)
        .enumerate()
        .map_init(Scratch::default, |scratch, (qi, out)| {
            attend_one(
                qi,
                queries,
                key_frames,
                &offsets,
                candidates.row(qi),
                params.scale,
                scratch,
                out,
            )
        })
        .collect::<Result<_>>()?;

    let mut stats = AttentionStats {
        queries: n as u64,
        ..Default::default()
    };
    for (qi, qc) in counters.iter().enumerate() {
        stats.score_evals += qc.score_evals;
        stats.softmax_count += qc.softmax;
        stats.empty_queries += qc.empty;
        stats.max_softmax = stats
            .max_softmax
            .max(candidates.row(qi).len() as u64 * qc.softmax);
    }
    stats.peak_score_buffer = stats.score_evals;
    // q.k and the weighted value sum each cost C multiply-adds per score
    stats.score_macs = 2 * stats.score_evals * c as u64;
    Ok((output, stats))
}

/// Output of an attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub features: FeatureGrid,
    pub stats: AttentionStats,
}

/// Attention where each query attends exactly its listed candidates among
/// the concatenated pixels of `keys_values`. A query with an empty list
/// outputs `W^V` applied to its own feature.
pub fn masked_attention(
    queries: &FeatureGrid,
    keys_values: &[&FeatureGrid],
    candidates: &CandidateLists,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let q = ProjectedFrame::new(queries, params)?;
    let kv = keys_values
        .iter()
        .map(|f| ProjectedFrame::new(f, params))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ProjectedFrame> = kv.iter().collect();
    let (data, mut stats) = masked_attention_projected(&q, &refs, candidates, params)?;
    let c = params.channels() as u64;
    let kv_rows: u64 = kv.iter().map(|f| f.len() as u64).sum();
    stats.projection_macs = (q.len() as u64 + 2 * kv_rows) * c * c;
    Ok(AttentionOutput {
        features: FeatureGrid::from_vec(queries.rows(), queries.cols(), queries.channels(), data)?,
        stats,
    })
}

/// Dense attention of every query over every pixel of `keys_values`.
pub fn full_attention(
    queries: &FeatureGrid,
    keys_values: &[&FeatureGrid],
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let c = queries.channels();
    params.check_channels(c)?;
    let proj = |m: &DMatrix<f64>, f: &FeatureGrid| -> Result<Vec<f64>> {
        params.check_channels(f.channels())?;
        Ok(project_rows(m, f.data(), c))
    };
    let q = proj(&params.wq, queries)?;
    let mut k = Vec::new();
    let mut v = Vec::new();
    for f in keys_values {
        k.extend(proj(&params.wk, f)?);
        v.extend(proj(&params.wv, f)?);
    }
    let n_keys = k.len() / c.max(1);
    let n = queries.len();
    let inv_sqrt_d = 1.0 / params.scale.sqrt();

    let mut out = vec![0.0; n * c];
    if n_keys == 0 {
        // no keys at all: every query takes the self fallback
        let vq = proj(&params.wv, queries)?;
        out.copy_from_slice(&vq);
    } else {
        out.par_chunks_mut(c).zip(q.par_chunks(c)).for_each_init(
            || vec![0.0; n_keys],
            |scores, (o, qv)| {
                for (s, kv) in scores.iter_mut().zip(k.chunks(c)) {
                    *s = qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d;
                }
                softmax_in_place(scores);
                o.fill(0.0);
                for (w, vv) in scores.iter().zip(v.chunks(c)) {
                    for (x, y) in o.iter_mut().zip(vv) {
                        *x += w * y;
                    }
                }
            },
        );
    }
    let evals = (n * n_keys) as u64;
    let stats = AttentionStats {
        queries: n as u64,
        score_evals: evals,
        softmax_count: if n_keys == 0 { 0 } else { n as u64 },
        max_softmax: n_keys as u64,
        empty_queries: if n_keys == 0 { n as u64 } else { 0 },
        peak_score_buffer: evals,
        projection_macs: ((n + 2 * n_keys) * c * c) as u64,
        score_macs: 2 * evals * c as u64,
    };
    Ok(AttentionOutput {
        features: FeatureGrid::from_vec(queries.rows(), queries.cols(), c, out)?,
        stats,
    })
}

/// Softmax weights each query assigns to its candidates, in candidate order.
pub fn attention_weights(
    queries: &FeatureGrid,
    keys_values: &[&FeatureGrid],
    candidates: &CandidateLists,
    params: &AttentionParams,
) -> Result<Vec<Vec<f64>>> {
    let c = queries.channels();
    let q = ProjectedFrame::new(queries, params)?;
    let kv = keys_values
        .iter()
        .map(|f| ProjectedFrame::new(f, params))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<&[f64]> = kv.iter().flat_map(|f| f.k.chunks(c)).collect();
    let inv_sqrt_d = 1.0 / params.scale.sqrt();
    (0..q.len())
        .map(|qi| {
            let qv = ProjectedFrame::row(&q.q, qi, c);
            let mut w = candidates
                .row(qi)
                .iter()
                .map(|&key| {
                    let k = keys.get(key as usize).ok_or(Error::CandidateOutOfBounds {
                        index: key as usize,
                        len: keys.len(),
                    })?;
                    Ok(qv.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d)
                })
                .collect::<Result<Vec<f64>>>()?;
            if !w.is_empty() {
                softmax_in_place(&mut w);
            }
            Ok(w)
        })
        .collect()
}
