//! Binary ray-attention parameter files.
//!
//! ```text
//! magic        4 bytes "RAPM"
//! version      u32     1
//! heads J      u32
//! samples K    u32
//! offset mode  u8      0 free, 1 along ray
//! weight mode  u8      0 scalar, 1 per channel
//! channels     u32     0 for scalar weights
//! head weights f64 x (J or J*C)
//! logits       f64 x K*J
//! offsets      f64 x K*J*3 (free) or K*J (along ray)
//! ```
//!
//! Little-endian throughout.

use std::io::{Read, Write};

use nalgebra::Vector3;

use super::{HeadWeights, Offsets, RayAttentionParams};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"RAPM";
pub const PARAMS_VERSION: u32 = 1;

pub fn write_params<W: Write>(p: &RayAttentionParams, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.heads() as u32).to_le_bytes());
    buf.extend_from_slice(&(p.samples() as u32).to_le_bytes());
    buf.push(matches!(p.offsets, Offsets::AlongRay(_)) as u8);
    let (mode, channels, weights) = match &p.head_weights {
        HeadWeights::Scalar(w) => (0u8, 0u32, w.as_slice()),
        HeadWeights::PerChannel { channels, values } => (1, *channels as u32, values.as_slice()),
    };
    buf.push(mode);
    buf.extend_from_slice(&channels.to_le_bytes());
    let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
    weights.iter().for_each(|&v| put(v));
    p.logits.iter().for_each(|&v| put(v));
    match &p.offsets {
        Offsets::Free(o) => o
            .iter()
            .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
            .for_each(&mut put),
        Offsets::AlongRay(o) => o.iter().for_each(|&v| put(v)),
    }
    out.write_all(&buf)?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated parameter file: {e}")))?;
    Ok(b)
}

fn f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(take(r)?))).collect()
}

pub fn read_params<R: Read>(mut r: R) -> Result<RayAttentionParams> {
    if &take::<4>(&mut r)? != PARAMS_MAGIC {
        return Err(Error::Format("not a ray parameter file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != PARAMS_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter version {version}"
        )));
    }
    let heads = u32::from_le_bytes(take(&mut r)?) as usize;
    let samples = u32::from_le_bytes(take(&mut r)?) as usize;
    let [offset_mode] = take::<1>(&mut r)?;
    let [weight_mode] = take::<1>(&mut r)?;
    let channels = u32::from_le_bytes(take(&mut r)?) as usize;
    if heads == 0 || samples == 0 || heads * samples > 1 << 24 || channels > 1 << 16 {
        return Err(Error::Format(format!(
            "implausible shape J={heads} K={samples} C={channels}"
        )));
    }
    let head_weights = match (weight_mode, channels) {
        (0, 0) => HeadWeights::Scalar(f64s(&mut r, heads)?),
        (1, c) if c > 0 => HeadWeights::PerChannel {
            channels: c,
            values: f64s(&mut r, heads * c)?,
        },
        _ => return Err(Error::Format("bad head-weight mode".into())),
    };
    let kj = heads * samples;
    let logits = f64s(&mut r, kj)?;
    let offsets = match offset_mode {
        0 => Offsets::Free(
            f64s(&mut r, kj * 3)?
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        ),
        1 => Offsets::AlongRay(f64s(&mut r, kj)?),
        m => return Err(Error::Format(format!("bad offset mode {m}"))),
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    RayAttentionParams::new(samples, heads, head_weights, logits, offsets)
        .map_err(|e| Error::Format(e.to_string()))
}
