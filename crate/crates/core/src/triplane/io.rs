//! Binary triplane files.
//!
//! ```text
//! magic     4 bytes  "TRPL"
//! version   u32      1
//! channels  u32
//! 3 x plane header, in XY, XZ, YZ order:
//!     rows u32, cols u32,
//!     first_min f64, first_max f64, second_min f64, second_max f64
//! 3 x plane features, same order: rows * cols * channels f32,
//!     row-major with channels fastest
//! ```
//!
//! All fields are little-endian. Features are stored as 32-bit floats, so a
//! round trip rounds every value to `f32`.

use std::io::{Read, Write};

use super::{Extent, FeaturePlane, PlaneAxis, Triplane};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

pub const TRIPLANE_MAGIC: &[u8; 4] = b"TRPL";
pub const TRIPLANE_VERSION: u32 = 1;

pub fn write_triplane<W: Write>(tp: &Triplane, mut out: W) -> Result<()> {
    out.write_all(TRIPLANE_MAGIC)?;
    out.write_all(&TRIPLANE_VERSION.to_le_bytes())?;
    out.write_all(&(tp.channels() as u32).to_le_bytes())?;
    for axis in PlaneAxis::ALL {
        let p = tp.plane(axis);
        let (first, second) = p.extents();
        out.write_all(&(p.features().rows() as u32).to_le_bytes())?;
        out.write_all(&(p.features().cols() as u32).to_le_bytes())?;
        for v in [first.min, first.max, second.min, second.max] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for axis in PlaneAxis::ALL {
        let mut buf = Vec::with_capacity(tp.plane(axis).features().data().len() * 4);
        for &v in tp.plane(axis).features().data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated triplane file: {e}")))?;
    Ok(b)
}

pub fn read_triplane<R: Read>(mut r: R) -> Result<Triplane> {
    if &take::<4>(&mut r)? != TRIPLANE_MAGIC {
        return Err(Error::Format("not a triplane file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != TRIPLANE_VERSION {
        return Err(Error::Format(format!(
            "unsupported triplane version {version}"
        )));
    }
    let channels = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut headers = Vec::with_capacity(3);
    for _ in 0..3 {
        let rows = u32::from_le_bytes(take(&mut r)?) as usize;
        let cols = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut e = [0.0; 4];
        for v in &mut e {
            *v = f64::from_le_bytes(take(&mut r)?);
        }
        let first = Extent::new(e[0], e[1]).map_err(|e| Error::Format(e.to_string()))?;
        let second = Extent::new(e[2], e[3]).map_err(|e| Error::Format(e.to_string()))?;
        headers.push((rows, cols, first, second));
    }
    let mut planes = Vec::with_capacity(3);
    for (axis, (rows, cols, first, second)) in PlaneAxis::ALL.into_iter().zip(headers) {
        let n = rows
            .checked_mul(cols)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| Error::Format("plane size overflows".into()))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated {axis} features: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let grid = FeatureGrid::from_vec(rows, cols, channels, data)?;
        planes.push(
            FeaturePlane::new(axis, grid, first, second)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after triplane".into()));
    }
    let yz = planes.pop().unwrap();
    let xz = planes.pop().unwrap();
    let xy = planes.pop().unwrap();
    Triplane::new(xy, xz, yz).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::{TriplaneConfig, TriplaneExtents};
    use super::*;

    fn sample() -> Triplane {
        let cfg = TriplaneConfig {
            extents: TriplaneExtents::default(),
            resolution: 4,
            channels: 2,
        };
        Triplane::from_fn(&cfg, |a, r, c, ch| {
            (a as usize * 31 + r * 7 + c * 3 + ch) as f64 * 0.125 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn round_trip_exact_for_f32_values() {
        let tp = sample();
        let mut buf = Vec::new();
        write_triplane(&tp, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 3 * 40 + 3 * 4 * 4 * 2 * 4);
        assert_eq!(read_triplane(buf.as_slice()).unwrap(), tp);
    }

    #[test]
    fn header_and_size_errors() {
        let tp = sample();
        let mut buf = Vec::new();
        write_triplane(&tp, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_triplane(bad.as_slice()).is_err());
        assert!(read_triplane(&buf[..buf.len() - 2]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_triplane(long.as_slice()).is_err());
        // inverted XY first-axis extent
        let mut bad = buf;
        let min_off = 12 + 8;
        bad[min_off..min_off + 8].copy_from_slice(&500.0f64.to_le_bytes());
        assert!(read_triplane(bad.as_slice()).is_err());
    }

    #[test]
    fn corrupted_feature_byte_changes_values() {
        let tp = sample();
        let mut buf = Vec::new();
        write_triplane(&tp, &mut buf).unwrap();
        let last = buf.len() - 2;
        buf[last] ^= 0x40;
        let back = read_triplane(buf.as_slice()).unwrap();
        assert_ne!(back, tp);
    }
}
