//! Exact operation counts for interframe attention under a frame schedule.

use std::io::Write;

use crate::error::{Error, Result};

/// Column names of the cost-report CSV, version 1.
pub const COST_CSV_HEADER: &str = "schema_version,frames,height,width,channels,queries,\
attended_pairs,score_evals,softmax_count,max_softmax,empty_queries,peak_score_buffer,\
projection_macs,score_macs,full_cross_pairs";

/// Candidate totals for the queries of one frame, summed over every frame it
/// attends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCount {
    /// Sum of candidate counts over the frame's queries.
    pub total: u64,
    /// Largest candidate count of a single query.
    pub max_per_query: u64,
    /// Queries with no candidate at all.
    pub empty_queries: u64,
}

/// How many keys each query sees in every attended frame.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateModel {
    /// Every pixel of the attended frame.
    Full,
    /// Exactly `M` candidates per query per attended frame.
    Uniform(u64),
    /// Measured totals per query frame (indexed by frame).
    PerFrame(Vec<PairCount>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostReport {
    pub frames: u64,
    pub height: u64,
    pub width: u64,
    pub channels: u64,
    /// `N * H * W`.
    pub queries: u64,
    /// Directed (query frame, attended frame) pairs in the schedule.
    pub attended_pairs: u64,
    pub score_evals: u64,
    pub softmax_count: u64,
    pub max_softmax: u64,
    pub empty_queries: u64,
    pub peak_score_buffer: u64,
    pub projection_macs: u64,
    pub score_macs: u64,
    /// `(N H W)^2`: every pixel of every frame against every other.
    pub full_cross_pairs: u64,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.projection_macs + self.score_macs
    }

    /// Average candidates per query and attended frame (`M`).
    pub fn mean_candidates(&self) -> f64 {
        let denom = self.queries as f64 / self.frames.max(1) as f64 * self.attended_pairs as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.score_evals as f64 / denom
        }
    }

    pub fn write_csv_row<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "1,{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.frames,
            self.height,
            self.width,
            self.channels,
            self.queries,
            self.attended_pairs,
            self.score_evals,
            self.softmax_count,
            self.max_softmax,
            self.empty_queries,
            self.peak_score_buffer,
            self.projection_macs,
            self.score_macs,
            self.full_cross_pairs
        )?;
        Ok(())
    }

    pub fn write_csv<W: Write>(reports: &[CostReport], mut out: W) -> Result<()> {
        writeln!(out, "{COST_CSV_HEADER}")?;
        for r in reports {
            r.write_csv_row(&mut out)?;
        }
        Ok(())
    }
}

/// Closed-form operation counts of interframe attention where frame `m`
/// attends the frames in `schedule[m]`. Every frame is projected once by
/// `W^Q`, `W^K` and `W^V`.
pub fn cost_model(
    height: usize,
    width: usize,
    channels: usize,
    schedule: &[Vec<usize>],
    candidates: &CandidateModel,
) -> Result<CostReport> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::InvalidConfig(
            "cost model needs positive dimensions".into(),
        ));
    }
    let n = schedule.len() as u64;
    let hw = (height * width) as u64;
    let c = channels as u64;
    if let CandidateModel::PerFrame(v) = candidates {
        if v.len() != schedule.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frame counts for {} frames",
                v.len(),
                schedule.len()
            )));
        }
    }

    let mut report = CostReport {
        frames: n,
        height: height as u64,
        width: width as u64,
        channels: c,
        queries: n * hw,
        full_cross_pairs: (n * hw) * (n * hw),
        projection_macs: 3 * n * hw * c * c,
        ..Default::default()
    };
    for (m, attends) in schedule.iter().enumerate() {
        let a = attends.len() as u64;
        report.attended_pairs += a;
        let frame = match candidates {
            CandidateModel::Full => per_query(hw, a * hw),
            CandidateModel::Uniform(per) => per_query(hw, a * per),
            CandidateModel::PerFrame(v) => v[m],
        };
        report.score_evals += frame.total;
        report.empty_queries += frame.empty_queries;
        report.softmax_count += hw - frame.empty_queries;
        report.max_softmax = report.max_softmax.max(frame.max_per_query);
        report.peak_score_buffer = report.peak_score_buffer.max(frame.total);
    }
    report.score_macs = 2 * report.score_evals * c;
    Ok(report)
}

fn per_query(queries: u64, each: u64) -> PairCount {
    PairCount {
        total: queries * each,
        max_per_query: each,
        empty_queries: if each == 0 { queries } else { 0 },
    }
}
