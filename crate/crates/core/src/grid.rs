//! Dense `rows x cols x channels` feature storage shared by triplane planes,
//! per-frame image features and attention inputs.

use crate::error::{Error, Result};

/// Row-major feature array; the channel index varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {rows}x{cols}x{channels}, got {}",
                rows * cols * channels,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` at every entry.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            rows,
            cols,
            channels,
            data,
        }
    }

    pub fn constant(rows: usize, cols: usize, value: &[f64]) -> Self {
        Self::from_fn(rows, cols, value.len(), |_, _, ch| value[ch])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial cells (`rows * cols`).
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Feature vector at `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.cols + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Feature vector of the flattened cell `index = row * cols + col`.
    #[inline]
    pub fn cell(&self, index: usize) -> &[f64] {
        let start = index * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-wise sum of two grids of identical shape.
    pub fn add(&self, other: &FeatureGrid) -> Result<FeatureGrid> {
        if self.rows != other.rows || self.cols != other.cols || self.channels != other.channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.rows, self.cols, self.channels, other.rows, other.cols, other.channels
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(FeatureGrid { data, ..*self })
    }
}

/// Bilinear lookup on an equirectangular image feature grid at continuous
/// pixel coordinates (pixel centers at half-integers). Columns wrap around
/// the yaw seam; rows clamp at the poles.
pub fn sample_equirect(image: &FeatureGrid, u: f64, v: f64) -> Vec<f64> {
    let w = image.cols() as f64;
    let x = (u - 0.5).rem_euclid(w);
    let y = (v - 0.5).clamp(0.0, (image.rows() - 1) as f64);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let c0 = (x0 as usize) % image.cols();
    let c1 = (c0 + 1) % image.cols();
    let r0 = y0 as usize;
    let r1 = (r0 + 1).min(image.rows() - 1);
    let corners = [
        (image.at(r0, c0), (1.0 - fx) * (1.0 - fy)),
        (image.at(r0, c1), fx * (1.0 - fy)),
        (image.at(r1, c0), (1.0 - fx) * fy),
        (image.at(r1, c1), fx * fy),
    ];
    let mut out = vec![0.0; image.channels()];
    for (feat, wgt) in corners {
        for (o, f) in out.iter_mut().zip(feat) {
            *o += wgt * f;
        }
    }
    out
}
