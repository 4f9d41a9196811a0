//! Seeded fixtures shared by the criterion benchmarks.

use nalgebra::{DMatrix, Vector3};
use panoepi_core::attention::AttentionParams;
use panoepi_core::camera::Pose4DoF;
use panoepi_core::grid::FeatureGrid;
use panoepi_core::sequence::Trajectory;
use panoepi_core::triplane::{Triplane, TriplaneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Frames 10 m apart along X with a little lateral and heading jitter.
pub fn drive(frames: usize, rng: &mut impl Rng) -> Trajectory {
    Trajectory::new(
        (0..frames)
            .map(|i| {
                let p = Vector3::new(10.0 * i as f64, rng.random_range(-1.0..1.0), 1.6);
                (i, Pose4DoF::new(p, rng.random_range(-0.2..0.2)))
            })
            .collect(),
        None,
    )
    .expect("ids increase")
}

pub fn features(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> FeatureGrid {
    FeatureGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

pub fn params(c: usize, rng: &mut impl Rng) -> AttentionParams {
    let s = 1.0 / (c as f64).sqrt();
    let mut m = || DMatrix::from_fn(c, c, |_, _| rng.random_range(-s..s));
    let (q, k, v) = (m(), m(), m());
    AttentionParams::new(q, k, v, c as f64).expect("finite weights")
}

pub fn triplane(resolution: usize, channels: usize, rng: &mut impl Rng) -> Triplane {
    let cfg = TriplaneConfig {
        resolution,
        channels,
        ..TriplaneConfig::default()
    };
    Triplane::from_fn(&cfg, |_, _, _, _| rng.random_range(-1.0..1.0)).expect("valid config")
}
