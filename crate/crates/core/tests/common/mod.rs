//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Unit direction of the continuous pixel `(u, v)` on a `w x h` panorama,
/// camera frame: +X at the image center column, +Z up.
pub fn pixel_dir(u: f64, v: f64, w: usize, h: usize) -> Vector3<f64> {
    let lon = (u / w as f64 - 0.5) * 2.0 * PI;
    let lat = (0.5 - v / h as f64) * PI;
    Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

/// Camera center and yaw; returns the camera-frame direction towards `x`.
pub fn look_at(center: &Vector3<f64>, yaw: f64, x: &Vector3<f64>) -> Vector3<f64> {
    (rot_z(yaw).transpose() * (x - center)).normalize()
}

/// `[t]_x R` for cameras `(c_m, yaw_m)` and `(c_n, yaw_n)`, mapping frame m
/// rays to frame n normals.
pub fn essential_oracle(
    c_m: &Vector3<f64>,
    yaw_m: f64,
    c_n: &Vector3<f64>,
    yaw_n: f64,
) -> Matrix3<f64> {
    let r = rot_z(yaw_n).transpose() * rot_z(yaw_m);
    let t = rot_z(yaw_n).transpose() * (c_m - c_n);
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    tx * r
}

/// Band mask by scanning every column: the row whose span contains the sign
/// change of the residual, widened by `band` rows.
pub fn band_oracle(
    e: &Matrix3<f64>,
    d_m: &Vector3<f64>,
    w: usize,
    h: usize,
    band: usize,
) -> Vec<u32> {
    let n = e * d_m;
    let mut out = Vec::new();
    for col in 0..w {
        let u = col as f64 + 0.5;
        let s: Vec<f64> = (0..=h)
            .map(|v| pixel_dir(u, v as f64, w, h).dot(&n))
            .collect();
        let Some(r) = (0..h).find(|&r| s[r] == 0.0 || s[r] * s[r + 1] < 0.0) else {
            if s[h] == 0.0 {
                let lo = (h - 1).saturating_sub(band);
                out.extend((lo..h).map(|row| (row * w + col) as u32));
            }
            continue;
        };
        let lo = r.saturating_sub(band);
        let hi = (r + band).min(h - 1);
        out.extend((lo..=hi).map(|row| (row * w + col) as u32));
    }
    out
}

/// Every pixel center whose unit-normal residual is within `eps`, in
/// column-then-row order.
pub fn threshold_oracle(
    e: &Matrix3<f64>,
    d_m: &Vector3<f64>,
    w: usize,
    h: usize,
    eps: f64,
) -> Vec<u32> {
    let n = (e * d_m).normalize();
    let mut out = Vec::new();
    for col in 0..w {
        for row in 0..h {
            let d = pixel_dir(col as f64 + 0.5, row as f64 + 0.5, w, h);
            if d.dot(&n).abs() <= eps {
                out.push((row * w + col) as u32);
            }
        }
    }
    out
}

/// Textbook bilinear interpolation on a node-aligned grid stored row-major,
/// channels fastest.
pub fn bilinear_oracle(
    data: &[f64],
    rows: usize,
    cols: usize,
    channels: usize,
    gx: f64,
    gy: f64,
) -> Vec<f64> {
    let c0 = (gx.floor() as usize).min(cols - 2);
    let r0 = (gy.floor() as usize).min(rows - 2);
    let (tx, ty) = (gx - c0 as f64, gy - r0 as f64);
    let at = |r: usize, c: usize, ch: usize| data[(r * cols + c) * channels + ch];
    (0..channels)
        .map(|ch| {
            let top = at(r0, c0, ch) * (1.0 - tx) + at(r0, c0 + 1, ch) * tx;
            let bottom = at(r0 + 1, c0, ch) * (1.0 - tx) + at(r0 + 1, c0 + 1, ch) * tx;
            top * (1.0 - ty) + bottom * ty
        })
        .collect()
}

/// Dense scaled-dot-product attention written as plain loops.
pub fn attention_oracle(
    q_feats: &[Vec<f64>],
    kv_feats: &[Vec<f64>],
    candidates: &[Vec<usize>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    d: f64,
) -> Vec<Vec<f64>> {
    let mv = |m: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        m.iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    q_feats
        .iter()
        .zip(candidates)
        .map(|(x, cand)| {
            if cand.is_empty() {
                return mv(wv, x);
            }
            let q = mv(wq, x);
            let scores: Vec<f64> = cand
                .iter()
                .map(|&j| {
                    let k = mv(wk, &kv_feats[j]);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            let mut out = vec![0.0; x.len()];
            for (&j, e) in cand.iter().zip(&ex) {
                let v = mv(wv, &kv_feats[j]);
                for (o, vi) in out.iter_mut().zip(&v) {
                    *o += e / z * vi;
                }
            }
            out
        })
        .collect()
}

pub fn random_matrix(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}
