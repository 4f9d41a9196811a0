//! Ray-based pixel attention: a panorama pixel gathers triplane features at
//! `K` evenly spaced depths along its viewing ray, each head `j` perturbing
//! the sample positions by learned offsets and mixing them with
//! softmax-normalized weights:
//!
//! `F(u, v) = sum_j W_j sum_k A_kj F_tri(x_k + dx_kj)`, with `sum_k A_kj = 1`.

mod params_io;

pub use params_io::{read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};

use nalgebra::Vector3;

use crate::attention::softmax_in_place;
use crate::camera::{pixel_to_angles, EquirectGrid, PoseSE3};
use crate::error::{Error, Result};
use crate::triplane::Triplane;

/// Depth sampling along a pixel ray and the number of attention heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySampleConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub heads: usize,
}

impl Default for RaySampleConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            near: 1.0,
            far: 100.0,
            heads: 4,
        }
    }
}

impl RaySampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("K and J must be at least 1".into()));
        }
        if !(0.0 < self.near && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "depth range must satisfy 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// `r_k = near + k (far - near) / (K - 1)`; a single sample sits at `near`.
    pub fn depths(&self) -> Vec<f64> {
        if self.samples == 1 {
            return vec![self.near];
        }
        let step = (self.far - self.near) / (self.samples - 1) as f64;
        (0..self.samples)
            .map(|k| self.near + k as f64 * step)
            .collect()
    }
}

/// Per-sample, per-head position offsets, indexed `k * J + j`.
#[derive(Debug, Clone, PartialEq)]
pub enum Offsets {
    /// Free 3D displacement in world coordinates.
    Free(Vec<Vector3<f64>>),
    /// Signed displacement along the pixel ray, meters.
    AlongRay(Vec<f64>),
}

impl Offsets {
    fn len(&self) -> usize {
        match self {
            Offsets::Free(v) => v.len(),
            Offsets::AlongRay(v) => v.len(),
        }
    }

    /// World-space offset of entry `i` for a ray with unit direction `dir`.
    pub fn world(&self, i: usize, dir: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Offsets::Free(v) => v[i],
            Offsets::AlongRay(v) => dir * v[i],
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Offsets::Free(v) => v.iter().all(|o| o.iter().all(|x| x.is_finite())),
            Offsets::AlongRay(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Head mixing weights `W_j`.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadWeights {
    /// One scalar per head.
    Scalar(Vec<f64>),
    /// One weight per head and channel, indexed `j * C + c`.
    PerChannel { channels: usize, values: Vec<f64> },
}

impl HeadWeights {
    #[inline]
    fn get(&self, j: usize, c: usize) -> f64 {
        match self {
            HeadWeights::Scalar(w) => w[j],
            HeadWeights::PerChannel { channels, values } => values[j * channels + c],
        }
    }

    fn heads(&self) -> usize {
        match self {
            HeadWeights::Scalar(w) => w.len(),
            HeadWeights::PerChannel { channels, values } => values.len() / channels.max(&1),
        }
    }
}

/// Parameters of one pixel's ray attention: head weights, pre-softmax
/// logits `a_kj` (indexed `k * J + j`) and sample offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RayAttentionParams {
    samples: usize,
    heads: usize,
    pub head_weights: HeadWeights,
    pub logits: Vec<f64>,
    pub offsets: Offsets,
}

impl RayAttentionParams {
    pub fn new(
        samples: usize,
        heads: usize,
        head_weights: HeadWeights,
        logits: Vec<f64>,
        offsets: Offsets,
    ) -> Result<Self> {
        let kj = samples * heads;
        if samples == 0 || heads == 0 {
            return Err(Error::InvalidConfig("K and J must be at least 1".into()));
        }
        if logits.len() != kj || offsets.len() != kj || head_weights.heads() != heads {
            return Err(Error::ShapeMismatch(format!(
                "K={samples}, J={heads}: got {} logits, {} offsets, {} head weights",
                logits.len(),
                offsets.len(),
                head_weights.heads()
            )));
        }
        if let HeadWeights::PerChannel { channels, values } = &head_weights {
            if *channels == 0 || values.len() != heads * channels {
                return Err(Error::ShapeMismatch("per-channel head weights".into()));
            }
        }
        if !logits.iter().all(|x| x.is_finite()) || !offsets.is_finite() {
            return Err(Error::InvalidConfig("non-finite logits or offsets".into()));
        }
        Ok(Self {
            samples,
            heads,
            head_weights,
            logits,
            offsets,
        })
    }

    /// Zero offsets, uniform attention and `W_j = 1 / J`.
    pub fn initial(cfg: &RaySampleConfig, along_ray: bool) -> Self {
        let kj = cfg.samples * cfg.heads;
        let offsets = if along_ray {
            Offsets::AlongRay(vec![0.0; kj])
        } else {
            Offsets::Free(vec![Vector3::zeros(); kj])
        };
        Self {
            samples: cfg.samples,
            heads: cfg.heads,
            head_weights: HeadWeights::Scalar(vec![1.0 / cfg.heads as f64; cfg.heads]),
            logits: vec![0.0; kj],
            offsets,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `A_kj`: softmax of the logits over `k`, per head; indexed `k * J + j`.
    pub fn attention_weights(&self) -> Vec<f64> {
        let (k_n, j_n) = (self.samples, self.heads);
        let mut out = vec![0.0; k_n * j_n];
        let mut col = vec![0.0; k_n];
        for j in 0..j_n {
            for k in 0..k_n {
                col[k] = self.logits[k * j_n + j];
            }
            softmax_in_place(&mut col);
            for k in 0..k_n {
                out[k * j_n + j] = col[k];
            }
        }
        out
    }

    fn check(&self, cfg: &RaySampleConfig, channels: usize) -> Result<()> {
        cfg.validate()?;
        if cfg.samples != self.samples || cfg.heads != self.heads {
            return Err(Error::ShapeMismatch(format!(
                "params are K={}, J={}, config is K={}, J={}",
                self.samples, self.heads, cfg.samples, cfg.heads
            )));
        }
        if let HeadWeights::PerChannel { channels: c, .. } = &self.head_weights {
            if *c != channels {
                return Err(Error::ShapeMismatch(format!(
                    "head weights have {c} channels, triplane has {channels}"
                )));
            }
        }
        Ok(())
    }
}

/// World-space samples along the ray of `pixel` for a camera-to-world pose.
pub fn sample_ray_points(
    pose: &PoseSE3,
    pixel: (f64, f64),
    grid: &EquirectGrid,
    cfg: &RaySampleConfig,
) -> Result<Vec<Vector3<f64>>> {
    cfg.validate()?;
    let dir = world_ray(pose, pixel, grid)?;
    Ok(cfg
        .depths()
        .into_iter()
        .map(|r| pose.translation + dir * r)
        .collect())
}

fn world_ray(pose: &PoseSE3, pixel: (f64, f64), grid: &EquirectGrid) -> Result<Vector3<f64>> {
    Ok(pose.rotation * pixel_to_angles(pixel.0, pixel.1, grid)?.dir())
}

/// Every intermediate quantity of one ray-attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTrace {
    pub depths: Vec<f64>,
    /// Unperturbed ray samples `x_k`.
    pub points: Vec<Vector3<f64>>,
    /// `A_kj`, indexed `k * J + j`.
    pub weights: Vec<f64>,
    /// World offsets `dx_kj`, indexed `k * J + j`.
    pub offsets: Vec<Vector3<f64>>,
    pub feature: Vec<f64>,
}

/// Evaluates the ray attention of `pixel` and records the intermediates.
pub fn trace_ray_attention(
    tp: &Triplane,
    pose: &PoseSE3,
    pixel: (f64, f64),
    grid: &EquirectGrid,
    cfg: &RaySampleConfig,
    params: &RayAttentionParams,
) -> Result<RayTrace> {
    let c = tp.channels();
    params.check(cfg, c)?;
    let dir = world_ray(pose, pixel, grid)?;
    let depths = cfg.depths();
    let points: Vec<Vector3<f64>> = depths.iter().map(|r| pose.translation + dir * *r).collect();
    let weights = params.attention_weights();
    let j_n = params.heads;
    let offsets: Vec<Vector3<f64>> = (0..params.samples * j_n)
        .map(|i| params.offsets.world(i, &dir))
        .collect();

    let mut feature = vec![0.0; c];
    let mut head = vec![0.0; c];
    for j in 0..j_n {
        head.fill(0.0);
        for (k, x) in points.iter().enumerate() {
            let i = k * j_n + j;
            tp.accumulate(&(x + offsets[i]), weights[i], &mut head)
                .map_err(|e| Error::RaySampleOutOfExtent {
                    k,
                    j,
                    source: Box::new(e),
                })?;
        }
        for ch in 0..c {
            feature[ch] += params.head_weights.get(j, ch) * head[ch];
        }
    }
    Ok(RayTrace {
        depths,
        points,
        weights,
        offsets,
        feature,
    })
}

/// Aggregated triplane feature of one panorama pixel.
pub fn ray_pixel_attention(
    tp: &Triplane,
    pose: &PoseSE3,
    pixel: (f64, f64),
    grid: &EquirectGrid,
    cfg: &RaySampleConfig,
    params: &RayAttentionParams,
) -> Result<Vec<f64>> {
    Ok(trace_ray_attention(tp, pose, pixel, grid, cfg, params)?.feature)
}

/// Derivatives of the ray-attention output with respect to the logits and
/// offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RayJacobian {
    pub value: Vec<f64>,
    /// `d_logits[k * J + j][c] = d out_c / d a_kj`.
    pub d_logits: Vec<Vec<f64>>,
    /// `d_offsets[k * J + j][c] = d out_c / d dx_kj` (world coordinates).
    pub d_offsets: Vec<Vec<[f64; 3]>>,
    /// Unit ray direction, for along-ray offsets.
    pub ray_dir: Vector3<f64>,
    /// Some sample lies on a grid-cell edge; derivatives there are one-sided.
    pub on_boundary: bool,
}

/// Gradient of a scalar objective with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RayParamGrads {
    pub logits: Vec<f64>,
    pub offsets: Offsets,
}

impl RayJacobian {
    /// `d out_c / d s_kj` for along-ray offsets `dx_kj = s_kj * dir`.
    pub fn d_along_ray(&self, i: usize) -> Vec<f64> {
        self.d_offsets[i]
            .iter()
            .map(|g| g[0] * self.ray_dir.x + g[1] * self.ray_dir.y + g[2] * self.ray_dir.z)
            .collect()
    }

    /// Gradient of `0.5 * |out - target|^2`, shaped like `params`.
    pub fn loss_gradient(
        &self,
        target: &[f64],
        params: &RayAttentionParams,
    ) -> Result<RayParamGrads> {
        if target.len() != self.value.len() {
            return Err(Error::ShapeMismatch(format!(
                "target has {} channels, output has {}",
                target.len(),
                self.value.len()
            )));
        }
        let resid: Vec<f64> = self.value.iter().zip(target).map(|(a, b)| a - b).collect();
        let logits = self
            .d_logits
            .iter()
            .map(|d| d.iter().zip(&resid).map(|(g, r)| g * r).sum())
            .collect();
        let offsets = match &params.offsets {
            Offsets::Free(_) => Offsets::Free(
                self.d_offsets
                    .iter()
                    .map(|d| {
                        d.iter().zip(&resid).fold(Vector3::zeros(), |acc, (g, r)| {
                            acc + Vector3::new(g[0], g[1], g[2]) * *r
                        })
                    })
                    .collect(),
            ),
            Offsets::AlongRay(_) => Offsets::AlongRay(
                (0..self.d_offsets.len())
                    .map(|i| {
                        self.d_along_ray(i)
                            .iter()
                            .zip(&resid)
                            .map(|(g, r)| g * r)
                            .sum()
                    })
                    .collect(),
            ),
        };
        Ok(RayParamGrads { logits, offsets })
    }
}

/// Analytic Jacobian of [`ray_pixel_attention`] with respect to the logits
/// (through the per-head softmax) and the offsets (through the bilinear
/// gradients of the triplane).
pub fn ray_attention_grad(
    tp: &Triplane,
    pose: &PoseSE3,
    pixel: (f64, f64),
    grid: &EquirectGrid,
    cfg: &RaySampleConfig,
    params: &RayAttentionParams,
) -> Result<RayJacobian> {
    let c = tp.channels();
    params.check(cfg, c)?;
    let dir = world_ray(pose, pixel, grid)?;
    let depths = cfg.depths();
    let a = params.attention_weights();
    let (k_n, j_n) = (params.samples, params.heads);

    let mut samples = Vec::with_capacity(k_n * j_n);
    let mut on_boundary = false;
    for (k, r) in depths.iter().enumerate() {
        for j in 0..j_n {
            let x = pose.translation + dir * *r + params.offsets.world(k * j_n + j, &dir);
            let g = tp.gradient(&x).map_err(|e| Error::RaySampleOutOfExtent {
                k,
                j,
                source: Box::new(e),
            })?;
            on_boundary |= g.on_boundary;
            samples.push(g);
        }
    }

    let mut value = vec![0.0; c];
    let mut d_logits = vec![vec![0.0; c]; k_n * j_n];
    let mut d_offsets = vec![vec![[0.0; 3]; c]; k_n * j_n];
    for j in 0..j_n {
        // head mean S_j = sum_k A_kj F_kj
        let mut mean = vec![0.0; c];
        for k in 0..k_n {
            let i = k * j_n + j;
            for ch in 0..c {
                mean[ch] += a[i] * samples[i].value[ch];
            }
        }
        for ch in 0..c {
            value[ch] += params.head_weights.get(j, ch) * mean[ch];
        }
        for k in 0..k_n {
            let i = k * j_n + j;
            for ch in 0..c {
                let w = params.head_weights.get(j, ch);
                d_logits[i][ch] = w * a[i] * (samples[i].value[ch] - mean[ch]);
                let jac = samples[i].jacobian[ch];
                d_offsets[i][ch] = [w * a[i] * jac[0], w * a[i] * jac[1], w * a[i] * jac[2]];
            }
        }
    }
    Ok(RayJacobian {
        value,
        d_logits,
        d_offsets,
        ray_dir: dir,
        on_boundary,
    })
}

/// One gradient-descent step on the logits and offsets. The attention
/// weights stay normalized because they are always derived from logits.
pub fn refine_step(
    params: &RayAttentionParams,
    grads: &RayParamGrads,
    step_size: f64,
) -> Result<RayAttentionParams> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    if grads.logits.len() != params.logits.len() {
        return Err(Error::ShapeMismatch("logit gradient length".into()));
    }
    let logits = params
        .logits
        .iter()
        .zip(&grads.logits)
        .map(|(p, g)| p - step_size * g)
        .collect();
    let offsets = match (&params.offsets, &grads.offsets) {
        (Offsets::Free(p), Offsets::Free(g)) if p.len() == g.len() => {
            Offsets::Free(p.iter().zip(g).map(|(p, g)| p - g * step_size).collect())
        }
        (Offsets::AlongRay(p), Offsets::AlongRay(g)) if p.len() == g.len() => {
            Offsets::AlongRay(p.iter().zip(g).map(|(p, g)| p - step_size * g).collect())
        }
        _ => return Err(Error::ShapeMismatch("offset gradient layout".into())),
    };
    RayAttentionParams::new(
        params.samples,
        params.heads,
        params.head_weights.clone(),
        logits,
        offsets,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::{Extent, PlaneAxis, TriplaneConfig, TriplaneExtents};
    use approx::assert_abs_diff_eq;

    fn config(channels: usize) -> TriplaneConfig {
        TriplaneConfig {
            extents: TriplaneExtents {
                x: Extent::new(-20.0, 20.0).unwrap(),
                y: Extent::new(-20.0, 20.0).unwrap(),
                z: Extent::new(-5.0, 10.0).unwrap(),
            },
            resolution: 9,
            channels,
        }
    }

    fn wavy(channels: usize) -> Triplane {
        Triplane::from_fn(&config(channels), |a, r, c, ch| {
            let s = (a as usize * 17 + r * 5 + c * 11 + ch * 3) as f64;
            (s * 0.37).sin()
        })
        .unwrap()
    }

    fn grid() -> EquirectGrid {
        EquirectGrid::new(64, 32).unwrap()
    }

    #[test]
    fn config_validation_and_depths() {
        let cfg = RaySampleConfig {
            samples: 3,
            near: 1.0,
            far: 2.0,
            heads: 1,
        };
        assert_eq!(cfg.depths(), vec![1.0, 1.5, 2.0]);
        assert!(RaySampleConfig { near: 0.0, ..cfg }.validate().is_err());
        assert!(RaySampleConfig { far: 0.5, ..cfg }.validate().is_err());
        assert!(RaySampleConfig { samples: 0, ..cfg }.validate().is_err());
        assert_eq!(RaySampleConfig { samples: 1, ..cfg }.depths(), vec![1.0]);
    }

    #[test]
    fn ray_points_identity_pose() {
        let cfg = RaySampleConfig {
            samples: 2,
            near: 1.0,
            far: 2.0,
            heads: 1,
        };
        let g = grid();
        let pts = sample_ray_points(&PoseSE3::identity(), (32.0, 16.0), &g, &cfg).unwrap();
        assert_eq!(
            pts,
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)]
        );
    }

    #[test]
    fn single_sample_single_head_is_plain_lookup() {
        let tp = wavy(3);
        let cfg = RaySampleConfig {
            samples: 1,
            near: 4.0,
            far: 5.0,
            heads: 1,
        };
        let mut params = RayAttentionParams::initial(&cfg, false);
        params.head_weights = HeadWeights::Scalar(vec![1.0]);
        let pose = PoseSE3 {
            translation: Vector3::new(1.0, -2.0, 1.6),
            ..PoseSE3::identity()
        };
        let px = (40.3, 17.2);
        let out = ray_pixel_attention(&tp, &pose, px, &grid(), &cfg, &params).unwrap();
        let x = sample_ray_points(&pose, px, &grid(), &cfg).unwrap()[0];
        assert_abs_diff_eq!(
            out.as_slice(),
            tp.sample(&x).unwrap().as_slice(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn uniform_constant_field_scales_by_head_weight_sum() {
        let tp = Triplane::from_fn(&config(2), |a, _, _, ch| {
            if a == PlaneAxis::XY {
                [0.5, -2.0][ch]
            } else {
                0.0
            }
        })
        .unwrap();
        let cfg = RaySampleConfig {
            samples: 5,
            near: 1.0,
            far: 8.0,
            heads: 3,
        };
        let mut params = RayAttentionParams::initial(&cfg, false);
        params.head_weights = HeadWeights::Scalar(vec![0.2, 1.1, -0.4]);
        let out = ray_pixel_attention(
            &tp,
            &PoseSE3::identity(),
            (10.5, 16.5),
            &grid(),
            &cfg,
            &params,
        )
        .unwrap();
        assert_abs_diff_eq!(out[0], 0.9 * 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(out[1], 0.9 * -2.0, epsilon = 1e-13);
    }

    #[test]
    fn out_of_extent_names_sample_and_head() {
        let tp = wavy(1);
        let cfg = RaySampleConfig {
            samples: 4,
            near: 1.0,
            far: 40.0,
            heads: 2,
        };
        let params = RayAttentionParams::initial(&cfg, false);
        let err = ray_pixel_attention(
            &tp,
            &PoseSE3::identity(),
            (32.5, 16.5),
            &grid(),
            &cfg,
            &params,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::RaySampleOutOfExtent { k: 2, j: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn weights_normalized_per_head() {
        let cfg = RaySampleConfig {
            samples: 6,
            near: 1.0,
            far: 2.0,
            heads: 3,
        };
        let mut params = RayAttentionParams::initial(&cfg, false);
        for (i, l) in params.logits.iter_mut().enumerate() {
            *l = (i as f64 * 1.7).sin() * 30.0;
        }
        let a = params.attention_weights();
        for j in 0..3 {
            let s: f64 = (0..6).map(|k| a[k * 3 + j]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_field_has_zero_offset_gradient_and_singleton_zero_logit_gradient() {
        let tp = Triplane::from_fn(&config(2), |_, _, _, ch| ch as f64 + 0.5).unwrap();
        let cfg = RaySampleConfig {
            samples: 3,
            near: 1.0,
            far: 6.0,
            heads: 2,
        };
        let params = RayAttentionParams::initial(&cfg, false);
        let jac = ray_attention_grad(
            &tp,
            &PoseSE3::identity(),
            (20.3, 15.1),
            &grid(),
            &cfg,
            &params,
        )
        .unwrap();
        assert!(jac.d_offsets.iter().flatten().all(|g| g == &[0.0; 3]));

        let cfg1 = RaySampleConfig { samples: 1, ..cfg };
        let params1 = RayAttentionParams::initial(&cfg1, false);
        let jac = ray_attention_grad(
            &wavy(2),
            &PoseSE3::identity(),
            (20.3, 15.1),
            &grid(),
            &cfg1,
            &params1,
        )
        .unwrap();
        assert!(jac.d_logits.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn refine_step_zero_gradient_is_identity() {
        let cfg = RaySampleConfig {
            samples: 2,
            near: 1.0,
            far: 2.0,
            heads: 2,
        };
        let params = RayAttentionParams::initial(&cfg, true);
        let grads = RayParamGrads {
            logits: vec![0.0; 4],
            offsets: Offsets::AlongRay(vec![0.0; 4]),
        };
        assert_eq!(refine_step(&params, &grads, 0.1).unwrap(), params);
        assert!(refine_step(&params, &grads, 0.0).is_err());
        let wrong = RayParamGrads {
            logits: vec![0.0; 4],
            offsets: Offsets::Free(vec![Vector3::zeros(); 4]),
        };
        assert!(refine_step(&params, &wrong, 0.1).is_err());
    }

    #[test]
    fn per_channel_head_weights() {
        let tp = wavy(2);
        let cfg = RaySampleConfig {
            samples: 3,
            near: 1.0,
            far: 5.0,
            heads: 2,
        };
        let scalar = RayAttentionParams::initial(&cfg, false);
        let mut per = scalar.clone();
        per.head_weights = HeadWeights::PerChannel {
            channels: 2,
            values: vec![0.5, 0.5, 0.5, 0.5],
        };
        let a = ray_pixel_attention(
            &tp,
            &PoseSE3::identity(),
            (30.5, 14.5),
            &grid(),
            &cfg,
            &scalar,
        )
        .unwrap();
        let b = ray_pixel_attention(&tp, &PoseSE3::identity(), (30.5, 14.5), &grid(), &cfg, &per)
            .unwrap();
        assert_eq!(a, b);
    }
}
