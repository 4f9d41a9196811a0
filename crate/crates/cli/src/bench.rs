//! Sparse-vs-dense interframe attention timing.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use panoepi_core::attention::AttentionParams;
use panoepi_core::camera::{EquirectGrid, Pose4DoF};
use panoepi_core::epipolar::MaskConfig;
use panoepi_core::grid::FeatureGrid;
use panoepi_core::sequence::{
    build_frame_masks, dense_schedule, interframe_attention, sparse_schedule, FrameMasks,
    KeySelection, Schedule, Trajectory,
};
use panoepi_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BENCH_CSV_HEADER: &str = "schema_version,schedule,frames,width,height,channels,\
pairs,expected_pairs,score_evals,peak_score_buffer,median_seconds,status";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub frames: Vec<usize>,
    pub grid: EquirectGrid,
    pub channels: usize,
    pub band: usize,
    pub window: usize,
    pub reps: usize,
    pub seed: u64,
    /// Largest per-frame score buffer allowed before a run is skipped.
    pub cap: u64,
    /// Full cross-frame attention instead of epipolar masks.
    pub full: bool,
    /// Each timed repetition loops until it has run at least this long.
    pub min_batch_seconds: f64,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::InvalidConfig(
                "at least 3 repetitions are required".into(),
            ));
        }
        if self.frames.is_empty() || self.frames.contains(&0) {
            return Err(Error::InvalidConfig(
                "frame counts must be at least 1".into(),
            ));
        }
        if !(self.min_batch_seconds >= 0.0 && self.min_batch_seconds.is_finite()) {
            return Err(Error::InvalidConfig(
                "minimum batch time must be finite and non-negative".into(),
            ));
        }
        if self.channels == 0 || self.window == 0 {
            return Err(Error::InvalidConfig(
                "channels and window must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub schedule: &'static str,
    pub frames: usize,
    pub pairs: usize,
    pub expected_pairs: usize,
    pub score_evals: u64,
    pub peak_score_buffer: u64,
    /// `None` when the run exceeded the score-buffer cap.
    pub median_seconds: Option<f64>,
}

impl BenchRow {
    pub fn status(&self) -> &'static str {
        if self.median_seconds.is_some() {
            "ok"
        } else {
            "capped"
        }
    }
}

/// A straight drive with 10 m spacing and small seeded jitter.
pub fn bench_trajectory(frames: usize, rng: &mut impl Rng) -> Trajectory {
    Trajectory::new(
        (0..frames)
            .map(|i| {
                let p = Vector3::new(
                    10.0 * i as f64 + rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    1.6 + rng.random_range(-0.1..0.1),
                );
                (i, Pose4DoF::new(p, rng.random_range(-0.3..0.3)))
            })
            .collect(),
        None,
    )
    .expect("ids increase")
}

pub fn random_params(channels: usize, rng: &mut impl Rng) -> AttentionParams {
    let s = 1.0 / (channels as f64).sqrt();
    let mut m = || DMatrix::from_fn(channels, channels, |_, _| rng.random_range(-s..s));
    let (wq, wk, wv) = (m(), m(), m());
    AttentionParams::new(wq, wk, wv, channels as f64).expect("finite weights")
}

fn expected_pairs(kind: &str, n: usize, w: usize) -> usize {
    match kind {
        "dense" => n * (n - 1),
        _ if n >= w => w * n - w * (w + 1) / 2,
        _ => n * (n - 1) / 2,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// One prepared benchmark configuration.
struct Case {
    schedule_name: &'static str,
    frames: usize,
    feature_set: usize,
    schedule: Schedule,
    masks: Option<FrameMasks>,
    score_evals: u64,
    peak: u64,
    iters: u32,
    times: Vec<f64>,
}

impl Case {
    fn keys(&self) -> KeySelection<'_> {
        match &self.masks {
            None => KeySelection::Full,
            Some(m) => KeySelection::Epipolar(m),
        }
    }
}

/// Runs every frame count under both schedules. Only the attention call is
/// timed; masks and features are prepared beforehand. A warm-up call sizes
/// each batch so short runs are not dominated by timer noise, and
/// repetitions cycle through all configurations so drift hits them equally.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = random_params(spec.channels, &mut rng);
    let cfg = MaskConfig {
        band_halfwidth: spec.band,
        ..MaskConfig::default()
    };
    let (h, w) = (spec.grid.height(), spec.grid.width());
    let hw = spec.grid.pixel_count() as u64;
    let mut features: Vec<Vec<FeatureGrid>> = Vec::new();
    let mut cases = Vec::new();
    for &n in &spec.frames {
        let traj = bench_trajectory(n, &mut rng);
        features.push(
            (0..n)
                .map(|_| {
                    FeatureGrid::from_fn(h, w, spec.channels, |_, _, _| rng.random_range(-1.0..1.0))
                })
                .collect(),
        );
        for (name, schedule) in [
            ("sparse", sparse_schedule(n, spec.window)?),
            ("dense", dense_schedule(n)),
        ] {
            let masks = if spec.full {
                None
            } else {
                Some(build_frame_masks(&traj, &schedule, &spec.grid, &cfg)?)
            };
            let (score_evals, peak) = match &masks {
                None => {
                    let peak = (0..n)
                        .map(|m| schedule.attends(m).len() as u64 * hw * hw)
                        .max()
                        .unwrap_or(0);
                    (schedule.pair_count() as u64 * hw * hw, peak)
                }
                Some(masks) => {
                    let counts = masks.pair_counts(&schedule)?;
                    (
                        counts.iter().map(|c| c.total).sum(),
                        counts.iter().map(|c| c.total).max().unwrap_or(0),
                    )
                }
            };
            cases.push(Case {
                schedule_name: name,
                frames: n,
                feature_set: features.len() - 1,
                schedule,
                masks,
                score_evals,
                peak,
                iters: 0,
                times: Vec::with_capacity(spec.reps),
            });
        }
    }

    let timed = |case: &Case| -> Result<f64> {
        let frames = &features[case.feature_set];
        let start = Instant::now();
        for _ in 0..case.iters.max(1) {
            std::hint::black_box(interframe_attention(
                frames,
                &case.schedule,
                case.keys(),
                &params,
            )?);
        }
        Ok(start.elapsed().as_secs_f64() / case.iters.max(1) as f64)
    };
    for case in cases.iter_mut().filter(|c| c.peak <= spec.cap) {
        let once = timed(case)?;
        case.iters = (spec.min_batch_seconds / once.max(1e-9)).ceil().max(1.0) as u32;
    }
    for _ in 0..spec.reps {
        for case in cases.iter_mut().filter(|c| c.peak <= spec.cap) {
            let t = timed(case)?;
            case.times.push(t);
        }
    }

    Ok(cases
        .into_iter()
        .map(|c| BenchRow {
            schedule: c.schedule_name,
            frames: c.frames,
            pairs: c.schedule.pair_count(),
            expected_pairs: expected_pairs(c.schedule_name, c.frames, spec.window),
            score_evals: c.score_evals,
            peak_score_buffer: c.peak,
            median_seconds: (!c.times.is_empty()).then(|| median(c.times)),
        })
        .collect())
}

pub fn write_bench_csv<W: Write>(spec: &BenchSpec, rows: &[BenchRow], mut out: W) -> Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        let secs = r
            .median_seconds
            .map_or_else(|| "capped".to_string(), |s| format!("{s:.6}"));
        writeln!(
            out,
            "1,{},{},{},{},{},{},{},{},{},{},{}",
            r.schedule,
            r.frames,
            spec.grid.width(),
            spec.grid.height(),
            spec.channels,
            r.pairs,
            r.expected_pairs,
            r.score_evals,
            r.peak_score_buffer,
            secs,
            r.status()
        )?;
    }
    Ok(())
}

/// Ratio of a quantity between the largest and smallest frame counts of a
/// schedule.
pub fn ratio(
    rows: &[BenchRow],
    schedule: &str,
    f: impl Fn(&BenchRow) -> Option<f64>,
) -> Option<f64> {
    let mut sel: Vec<&BenchRow> = rows.iter().filter(|r| r.schedule == schedule).collect();
    sel.sort_by_key(|r| r.frames);
    let (first, last) = (sel.first()?, sel.last()?);
    Some(f(last)? / f(first)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_match_closed_forms_and_cap_applies() {
        let spec = BenchSpec {
            frames: vec![1, 3, 5],
            grid: EquirectGrid::new(16, 4).unwrap(),
            channels: 2,
            band: 1,
            window: 2,
            reps: 3,
            seed: 1,
            cap: 10_000,
            full: true,
            min_batch_seconds: 0.0,
        };
        let rows = run_bench(&spec).unwrap();
        for r in &rows {
            assert_eq!(r.pairs, r.expected_pairs);
            assert_eq!(r.score_evals, r.pairs as u64 * 64 * 64);
        }
        // dense N=5 attends 4 frames: 4 * 64 * 64 > cap
        let capped: Vec<_> = rows.iter().filter(|r| r.median_seconds.is_none()).collect();
        assert_eq!(capped.len(), 1);
        assert_eq!((capped[0].schedule, capped[0].frames), ("dense", 5));
        let mut buf = Vec::new();
        write_bench_csv(&spec, &rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(BENCH_CSV_HEADER));
        assert!(text.contains(",capped,capped"));
    }

    #[test]
    fn bench_settings_validation() {
        let mut spec = BenchSpec {
            frames: vec![2],
            grid: EquirectGrid::new(16, 4).unwrap(),
            channels: 2,
            band: 1,
            window: 2,
            reps: 2,
            seed: 1,
            cap: 1,
            full: false,
            min_batch_seconds: 0.0,
        };
        assert!(spec.validate().is_err());
        spec.reps = 3;
        assert!(spec.validate().is_ok());
        spec.frames = vec![0];
        assert!(spec.validate().is_err());
    }
}
