//! Per-query candidate lists for one frame pair, stored as compressed sparse
//! rows (one row per query pixel), with binary and text encodings.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic      4 bytes  "EPMK"
//! version    u32      1
//! width      u32
//! height     u32
//! band       u32      band half-width
//! mode       u8       0 = band, 1 = threshold
//! eps        f64      residual bound satisfied by every candidate
//! queries    u64      number of query pixels (rows)
//! nnz        u64      total candidates
//! row_ptr    u64 x (queries + 1)
//! full       u8  x queries        1 when the query is an epipole
//! indices    u32 x nnz            flat target pixel index row * W + col
//! ```
//!
//! The text form starts with `EPMK-TEXT 1 W H band mode eps` and then holds one
//! line per query: `query_index full count idx...`.

use std::io::{BufRead, Read, Write};

use rayon::prelude::*;

use super::mask::{EpipolarMasker, MaskKind, MaskMode};
use super::EssentialMatrix;
use crate::camera::{pixel_to_angles, EquirectGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EPMK";
const TEXT_MAGIC: &str = "EPMK-TEXT";
const VERSION: u32 = 1;

/// Masks of every query pixel of frame `m` against frame `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMasks {
    grid: EquirectGrid,
    band_halfwidth: usize,
    mode: MaskMode,
    eps: f64,
    row_ptr: Vec<usize>,
    full: Vec<bool>,
    indices: Vec<u32>,
}

impl PairMasks {
    /// Generates masks for all `W * H` query pixels. Rows are computed in
    /// parallel and concatenated in query order, so the result does not
    /// depend on the thread count.
    pub fn build(masker: &EpipolarMasker, e: &EssentialMatrix) -> Result<Self> {
        let grid = *masker.grid();
        let per_row: Vec<(Vec<usize>, Vec<bool>, Vec<u32>)> = (0..grid.height())
            .into_par_iter()
            .map(|row| {
                let mut lens = Vec::with_capacity(grid.width());
                let mut full = Vec::with_capacity(grid.width());
                let mut idx = Vec::new();
                for col in 0..grid.width() {
                    let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                    let d_m = pixel_to_angles(u, v, &grid)
                        .expect("pixel centers are in range")
                        .dir();
                    let before = idx.len();
                    let kind = masker.mask_direction_into(e, &d_m, &mut idx);
                    lens.push(idx.len() - before);
                    full.push(kind == MaskKind::Full);
                }
                (lens, full, idx)
            })
            .collect();

        let mut row_ptr = Vec::with_capacity(grid.pixel_count() + 1);
        row_ptr.push(0);
        let mut full = Vec::with_capacity(grid.pixel_count());
        let mut indices = Vec::new();
        for (lens, f, idx) in per_row {
            for len in lens {
                row_ptr.push(row_ptr.last().unwrap() + len);
            }
            full.extend(f);
            indices.extend(idx);
        }
        Ok(Self {
            grid,
            band_halfwidth: masker.config().band_halfwidth,
            mode: masker.config().mode,
            eps: masker.residual_bound(),
            row_ptr,
            full,
            indices,
        })
    }

    pub fn grid(&self) -> &EquirectGrid {
        &self.grid
    }

    pub fn band_halfwidth(&self) -> usize {
        self.band_halfwidth
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn query_count(&self) -> usize {
        self.full.len()
    }

    /// Candidates of the query pixel with flat index `query`.
    pub fn candidates(&self, query: usize) -> &[u32] {
        &self.indices[self.row_ptr[query]..self.row_ptr[query + 1]]
    }

    pub fn is_full(&self, query: usize) -> bool {
        self.full[query]
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Total candidates over all queries.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn max_candidates(&self) -> usize {
        self.row_ptr
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }

    pub fn mean_candidates(&self) -> f64 {
        if self.query_count() == 0 {
            0.0
        } else {
            self.nnz() as f64 / self.query_count() as f64
        }
    }

    /// Number of queries whose mask degenerated to the full image.
    pub fn full_count(&self) -> usize {
        self.full.iter().filter(|&&f| f).count()
    }

    /// Queries whose candidate list is empty.
    pub fn empty_count(&self) -> usize {
        self.row_ptr.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

fn mode_code(mode: MaskMode) -> u8 {
    match mode {
        MaskMode::Band => 0,
        MaskMode::Threshold => 1,
    }
}

fn mode_from_code(code: u8) -> Result<MaskMode> {
    match code {
        0 => Ok(MaskMode::Band),
        1 => Ok(MaskMode::Threshold),
        other => Err(Error::Format(format!("unknown mask mode {other}"))),
    }
}

pub fn write_masks<W: Write>(masks: &PairMasks, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(masks.grid.width() as u32).to_le_bytes())?;
    out.write_all(&(masks.grid.height() as u32).to_le_bytes())?;
    out.write_all(&(masks.band_halfwidth as u32).to_le_bytes())?;
    out.write_all(&[mode_code(masks.mode)])?;
    out.write_all(&masks.eps.to_le_bytes())?;
    out.write_all(&(masks.query_count() as u64).to_le_bytes())?;
    out.write_all(&(masks.nnz() as u64).to_le_bytes())?;
    for &p in &masks.row_ptr {
        out.write_all(&(p as u64).to_le_bytes())?;
    }
    let flags: Vec<u8> = masks.full.iter().map(|&f| f as u8).collect();
    out.write_all(&flags)?;
    for &i in &masks.indices {
        out.write_all(&i.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated mask file: {e}")))?;
    Ok(buf)
}

pub fn read_masks<R: Read>(mut r: R) -> Result<PairMasks> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad mask file magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported mask version {version}")));
    }
    let width = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let height = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let band_halfwidth = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mode = mode_from_code(read_array::<1>(&mut r)?[0])?;
    let eps = f64::from_le_bytes(read_array(&mut r)?);
    let queries = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let nnz = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let grid = EquirectGrid::new(width, height)?;
    if queries != grid.pixel_count() {
        return Err(Error::Format(format!(
            "{queries} queries for a {grid} grid"
        )));
    }
    let row_ptr = (0..=queries)
        .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut flags = vec![0u8; queries];
    r.read_exact(&mut flags)
        .map_err(|e| Error::Format(format!("truncated mask file: {e}")))?;
    let indices = (0..nnz)
        .map(|_| Ok(u32::from_le_bytes(read_array(&mut r)?)))
        .collect::<Result<Vec<_>>>()?;
    let masks = PairMasks {
        grid,
        band_halfwidth,
        mode,
        eps,
        row_ptr,
        full: flags.into_iter().map(|f| f != 0).collect(),
        indices,
    };
    validate(&masks)?;
    Ok(masks)
}

fn validate(m: &PairMasks) -> Result<()> {
    if m.row_ptr.first() != Some(&0)
        || m.row_ptr.last() != Some(&m.indices.len())
        || m.row_ptr.windows(2).any(|w| w[0] > w[1])
    {
        return Err(Error::Format("inconsistent row pointers".into()));
    }
    let n = m.grid.pixel_count() as u32;
    if let Some(&bad) = m.indices.iter().find(|&&i| i >= n) {
        return Err(Error::Format(format!("candidate {bad} outside the grid")));
    }
    Ok(())
}

pub fn write_masks_text<W: Write>(masks: &PairMasks, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{TEXT_MAGIC} {VERSION} {} {} {} {} {:e}",
        masks.grid.width(),
        masks.grid.height(),
        masks.band_halfwidth,
        mode_code(masks.mode),
        masks.eps
    )?;
    for q in 0..masks.query_count() {
        let c = masks.candidates(q);
        write!(out, "{q} {} {}", masks.full[q] as u8, c.len())?;
        for i in c {
            write!(out, " {i}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_masks_text<R: BufRead>(r: R) -> Result<PairMasks> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty mask file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != TEXT_MAGIC {
        return Err(Error::Format(format!("bad mask header {header:?}")));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad number {s:?}")))
    };
    if num(fields[1])? != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {}", fields[1])));
    }
    let grid = EquirectGrid::new(num(fields[2])?, num(fields[3])?)?;
    let band_halfwidth = num(fields[4])?;
    let mode = mode_from_code(num(fields[5])? as u8)?;
    let eps: f64 = fields[6]
        .parse()
        .map_err(|_| Error::Format(format!("bad eps {:?}", fields[6])))?;

    let mut row_ptr = vec![0];
    let mut full = Vec::new();
    let mut indices = Vec::new();
    for (expected, line) in lines.enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Format(format!("short line for query {expected}")))
                .and_then(num)
        };
        if next()? != expected {
            return Err(Error::Format(format!("queries out of order at {expected}")));
        }
        full.push(next()? != 0);
        let count = next()?;
        for _ in 0..count {
            indices.push(next()? as u32);
        }
        row_ptr.push(indices.len());
    }
    if full.len() != grid.pixel_count() {
        return Err(Error::Format(format!(
            "{} queries for a {grid} grid",
            full.len()
        )));
    }
    let masks = PairMasks {
        grid,
        band_halfwidth,
        mode,
        eps,
        row_ptr,
        full,
        indices,
    };
    validate(&masks)?;
    Ok(masks)
}
