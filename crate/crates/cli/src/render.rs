//! Binary PPM (P6) rendering of epipolar curves, masks and epipoles.

use std::io::Write;

use panoepi_core::camera::EquirectGrid;
use panoepi_core::epipolar::EpipolarCurve;
use panoepi_core::{Error, Result};

pub const PALETTE: [[u8; 3]; 4] = [
    [0, 0, 0],     // background
    [255, 220, 0], // curve
    [255, 40, 40], // epipoles
    [40, 80, 160], // mask candidates
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderSpec {
    pub background: usize,
    pub curve: usize,
    pub epipole: usize,
    pub mask: usize,
    pub thickness: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            background: 0,
            curve: 1,
            epipole: 2,
            mask: 3,
            thickness: 1,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thickness == 0 {
            return Err(Error::InvalidConfig("thickness must be at least 1".into()));
        }
        if [self.background, self.curve, self.epipole, self.mask]
            .iter()
            .any(|&c| c >= PALETTE.len())
        {
            return Err(Error::InvalidConfig(
                "color index outside the palette".into(),
            ));
        }
        Ok(())
    }
}

/// Palette-indexed raster with horizontal wraparound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(grid: &EquirectGrid, background: usize) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            pixels: vec![background as u8; grid.pixel_count()],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> usize {
        self.pixels[row * self.width + col] as usize
    }

    pub fn set_index(&mut self, index: usize, color: usize) {
        self.pixels[index] = color as u8;
    }

    /// Paints a `size x size` square centered on the continuous point `(u, v)`.
    pub fn dot(&mut self, u: f64, v: f64, size: usize, color: usize) {
        let (w, h) = (self.width as i64, self.height as i64);
        let c0 = u.floor() as i64 - (size as i64 - 1) / 2;
        let r0 = (v.floor() as i64).min(h - 1) - (size as i64 - 1) / 2;
        for dr in 0..size as i64 {
            let r = r0 + dr;
            if !(0..h).contains(&r) {
                continue;
            }
            for dc in 0..size as i64 {
                let c = (c0 + dc).rem_euclid(w);
                self.pixels[(r * w + c) as usize] = color as u8;
            }
        }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for &p in &self.pixels {
            buf.extend_from_slice(&PALETTE[p as usize]);
        }
        out.write_all(&buf)?;
        Ok(())
    }
}

/// Draws the mask candidates, then the curve, then both epipoles.
pub fn render_curve(
    grid: &EquirectGrid,
    curve: &EpipolarCurve,
    epipoles: &[(f64, f64)],
    mask: Option<&[u32]>,
    spec: &RenderSpec,
) -> Result<Canvas> {
    spec.validate()?;
    let mut canvas = Canvas::new(grid, spec.background);
    for &i in mask.unwrap_or(&[]) {
        canvas.set_index(i as usize, spec.mask);
    }
    if let EpipolarCurve::Traced {
        points,
        whole_columns,
    } = curve
    {
        for &(u, v) in points {
            canvas.dot(u, v, spec.thickness, spec.curve);
        }
        for &col in whole_columns {
            for row in 0..grid.height() {
                canvas.dot(
                    col as f64 + 0.5,
                    row as f64 + 0.5,
                    spec.thickness,
                    spec.curve,
                );
            }
        }
    }
    let marker = spec.thickness + 2;
    for &(u, v) in epipoles {
        canvas.dot(u, v, marker, spec.epipole);
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let g = EquirectGrid::new(8, 4).unwrap();
        let mut c = Canvas::new(&g, 0);
        c.dot(7.9, 3.0, 3, 1);
        let mut buf = Vec::new();
        c.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n8 4\n255\n"));
        assert_eq!(buf.len(), 11 + 8 * 4 * 3);
        // wraps to column 0
        assert_eq!(c.get(0, 3), 1);
        assert_eq!(c.get(6, 2), 1);
        assert_eq!(c.get(1, 3), 0);
    }

    #[test]
    fn rejects_zero_thickness() {
        let spec = RenderSpec {
            thickness: 0,
            ..RenderSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
