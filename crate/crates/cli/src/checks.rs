//! End-to-end property and oracle checks run by `panoepi selftest`.
//!
//! Every reference value is recomputed here from first principles rather than
//! taken from the library under test.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use panoepi_core::attention::{
    cost_model, full_attention, masked_attention, AttentionParams, CandidateLists, CandidateModel,
};
use panoepi_core::camera::{
    angles_to_pixel, pixel_to_angles, project_point, EquirectGrid, Pose4DoF,
};
use panoepi_core::epipolar::{
    epipolar_curve, epipoles, relative_pose, EpipolarCurve, EpipolarMasker, EssentialMatrix,
    MaskConfig, MaskMode,
};
use panoepi_core::grid::FeatureGrid;
use panoepi_core::ray::{
    ray_attention_grad, ray_pixel_attention, trace_ray_attention, HeadWeights, Offsets,
    RayAttentionParams, RaySampleConfig,
};
use panoepi_core::sequence::{
    build_frame_masks, dense_schedule, interframe_attention, sparse_schedule, KeySelection,
};
use panoepi_core::triplane::{
    bilinear_grad, read_triplane, sample_3d, write_triplane, Extent, PlaneAxis, Triplane,
    TriplaneConfig, TriplaneExtents,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_trajectory, random_params, ratio, run_bench, BenchSpec};

#[derive(Debug, Clone, Default)]
pub struct CheckConfig {
    pub seed: u64,
    /// Flip this byte of the serialized triplane before reading it back.
    pub corrupt_triplane_byte: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub id: u32,
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Duration,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total && self.total > 0 && self.elapsed <= self.limit
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {}: {} ({}/{} cases, {:.3}s of {}s) {}",
            self.id,
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.total,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs(),
            self.detail
        )
    }
}

pub const CHECK_IDS: std::ops::RangeInclusive<u32> = 1..=11;

pub fn run_all(cfg: &CheckConfig) -> Vec<CheckReport> {
    CHECK_IDS.map(|id| run_check(id, cfg)).collect()
}

pub fn run_check(id: u32, cfg: &CheckConfig) -> CheckReport {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(id as u64));
    let start = Instant::now();
    let (name, limit, tally) = match id {
        1 => ("projection round trip", 1, projection_round_trip()),
        2 => ("epipolar soundness", 1, epipolar_soundness(&mut rng)),
        3 => ("mask oracle equivalence", 30, mask_oracle(&mut rng)),
        4 => ("sparsity bound", 60, sparsity_bound(&mut rng)),
        5 => ("masked vs full attention", 60, masked_vs_full(&mut rng)),
        6 => ("cost model exactness", 60, cost_exactness(&mut rng)),
        7 => ("scaling trend", 120, scaling_trend(cfg.seed)),
        8 => (
            "triplane aggregation",
            60,
            triplane_aggregation(&mut rng, cfg.corrupt_triplane_byte),
        ),
        9 => ("gradient checks", 60, gradient_checks(&mut rng)),
        10 => (
            "ray attention normalization",
            60,
            ray_normalization(&mut rng),
        ),
        11 => ("epipole property", 60, epipole_property(&mut rng)),
        _ => ("unknown", 0, Tally::default()),
    };
    CheckReport {
        id,
        name,
        passed: tally.passed,
        total: tally.total,
        detail: tally.detail,
        elapsed: start.elapsed(),
        limit: Duration::from_secs(limit),
    }
}

#[derive(Debug, Default)]
struct Tally {
    passed: usize,
    total: usize,
    worst: f64,
    detail: String,
}

impl Tally {
    fn record(&mut self, ok: bool) {
        self.total += 1;
        self.passed += ok as usize;
    }

    /// Records `err < tol` and tracks the largest error seen.
    fn within(&mut self, err: f64, tol: f64) {
        self.worst = self.worst.max(err);
        self.record(err < tol);
    }

    fn note(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn worst_note(self, label: &str) -> Self {
        let w = self.worst;
        self.note(format!("{label} {w:.3e}"))
    }
}

// ---- oracles ---------------------------------------------------------------

fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn pixel_dir(u: f64, v: f64, w: usize, h: usize) -> Vector3<f64> {
    let lon = (u / w as f64 - 0.5) * 2.0 * PI;
    let lat = (0.5 - v / h as f64) * PI;
    Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

fn dir_pixel(d: &Vector3<f64>, w: usize, h: usize) -> (f64, f64) {
    let lon = d.y.atan2(d.x);
    let lat = d.z.atan2(d.x.hypot(d.y));
    let u = (lon / (2.0 * PI) + 0.5) * w as f64;
    (u.rem_euclid(w as f64), (0.5 - lat / PI) * h as f64)
}

fn look_at(center: &Vector3<f64>, yaw: f64, x: &Vector3<f64>) -> Vector3<f64> {
    (rot_z(yaw).transpose() * (x - center)).normalize()
}

fn essential_oracle(pm: &Pose4DoF, pn: &Pose4DoF) -> Matrix3<f64> {
    let rn_t = rot_z(pn.yaw()).transpose();
    let r = rn_t * rot_z(pm.yaw());
    let t = rn_t * (pm.translation - pn.translation);
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0) * r
}

fn band_oracle(e: &Matrix3<f64>, d_m: &Vector3<f64>, w: usize, h: usize, band: usize) -> Vec<u32> {
    let n = e * d_m;
    let mut out = Vec::new();
    for col in 0..w {
        let u = col as f64 + 0.5;
        let s: Vec<f64> = (0..=h)
            .map(|v| pixel_dir(u, v as f64, w, h).dot(&n))
            .collect();
        let row = (0..h)
            .find(|&r| s[r] == 0.0 || s[r] * s[r + 1] < 0.0)
            .or((s[h] == 0.0).then_some(h - 1));
        if let Some(r) = row {
            let (lo, hi) = (r.saturating_sub(band), (r + band).min(h - 1));
            out.extend((lo..=hi).map(|row| (row * w + col) as u32));
        }
    }
    out
}

fn threshold_oracle(
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
            if pixel_dir(col as f64 + 0.5, row as f64 + 0.5, w, h)
                .dot(&n)
                .abs()
                <= eps
            {
                out.push((row * w + col) as u32);
            }
        }
    }
    out
}

fn bilinear_oracle(grid: &FeatureGrid, gx: f64, gy: f64) -> Vec<f64> {
    let c0 = (gx.floor() as usize).min(grid.cols() - 2);
    let r0 = (gy.floor() as usize).min(grid.rows() - 2);
    let (tx, ty) = (gx - c0 as f64, gy - r0 as f64);
    (0..grid.channels())
        .map(|ch| {
            let f = |r: usize, c: usize| grid.at(r, c)[ch];
            (f(r0, c0) * (1.0 - tx) + f(r0, c0 + 1) * tx) * (1.0 - ty)
                + (f(r0 + 1, c0) * (1.0 - tx) + f(r0 + 1, c0 + 1) * tx) * ty
        })
        .collect()
}

fn wrap_dist(a: (f64, f64), b: (f64, f64), w: f64) -> f64 {
    let du = (a.0 - b.0).rem_euclid(w);
    du.min(w - du).hypot(a.1 - b.1)
}

fn random_pose(rng: &mut impl Rng) -> Pose4DoF {
    Pose4DoF::new(
        Vector3::new(
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(1.0..3.0),
        ),
        rng.random_range(-PI..PI),
    )
}

fn random_pair(rng: &mut impl Rng) -> (Pose4DoF, Pose4DoF) {
    loop {
        let (a, b) = (random_pose(rng), random_pose(rng));
        if (a.translation - b.translation).norm() > 1.0 {
            return (a, b);
        }
    }
}

fn random_center(rng: &mut impl Rng, g: &EquirectGrid) -> (f64, f64) {
    (
        rng.random_range(0..g.width()) as f64 + 0.5,
        rng.random_range(0..g.height()) as f64 + 0.5,
    )
}

fn essential(pm: &Pose4DoF, pn: &Pose4DoF) -> EssentialMatrix {
    EssentialMatrix::new(&relative_pose(&pm.to_se3(), &pn.to_se3())).expect("nonzero baseline")
}

// ---- criteria --------------------------------------------------------------

fn projection_round_trip() -> Tally {
    let g = EquirectGrid::new(512, 128).expect("valid grid");
    let mut t = Tally::default();
    for (u, v) in g.pixel_centers() {
        let ray = pixel_to_angles(u, v, &g).expect("pixel center in range");
        let (u2, v2) = angles_to_pixel(&ray, &g);
        let dir_err = (ray.dir() - pixel_dir(u, v, 512, 128)).norm();
        t.within(wrap_dist((u, v), (u2, v2), 512.0).max(dir_err), 1e-9);
    }
    t.worst_note("max error")
}

fn epipolar_soundness(rng: &mut impl Rng) -> Tally {
    let g = EquirectGrid::new(512, 128).expect("valid grid");
    let mut t = Tally::default();
    while t.total < 1000 {
        let (pm, pn) = random_pair(rng);
        let x = Vector3::new(
            rng.random_range(-80.0..80.0),
            rng.random_range(-80.0..80.0),
            rng.random_range(-10.0..30.0),
        );
        if (x - pm.translation).norm() < 1.0 || (x - pn.translation).norm() < 1.0 {
            continue;
        }
        let px_m = project_point(&x, &pm.to_se3().inverse(), &g).expect("visible");
        let px_n = project_point(&x, &pn.to_se3().inverse(), &g).expect("visible");
        let d_m = pixel_to_angles(px_m.0, px_m.1, &g).expect("in range").dir();
        let d_n = pixel_to_angles(px_n.0, px_n.1, &g).expect("in range").dir();
        let e = essential(&pm, &pn);
        let agree = (d_m - look_at(&pm.translation, pm.yaw(), &x)).norm() < 1e-9
            && (e.matrix() - essential_oracle(&pm, &pn)).norm() < 1e-9;
        let r = d_n.dot(&(e.matrix() * d_m)).abs();
        t.worst = t.worst.max(r);
        t.record(agree && r < 1e-10);
    }
    t.worst_note("max |d_n^T E d_m|")
}

fn mask_oracle(rng: &mut impl Rng) -> Tally {
    let mut t = Tally::default();
    for (w, h) in [(32, 16), (64, 32)] {
        let g = EquirectGrid::new(w, h).expect("valid grid");
        let band = EpipolarMasker::new(g, MaskConfig::default()).expect("valid config");
        let thr_cfg = MaskConfig {
            eps: 0.05,
            mode: MaskMode::Threshold,
            ..MaskConfig::default()
        };
        let thr = EpipolarMasker::new(g, thr_cfg).expect("valid config");
        for _ in 0..50 {
            let (pm, pn) = random_pair(rng);
            let e = essential(&pm, &pn);
            let e_ref = essential_oracle(&pm, &pn);
            for _ in 0..20 {
                let q = random_center(rng, &g);
                let d = pixel_dir(q.0, q.1, w, h);
                let got = band.mask(&e, q).expect("in range");
                let want = band_oracle(&e_ref, &d, w, h, 1);
                let got_t = thr.mask(&e, q).expect("in range");
                let want_t = threshold_oracle(&e_ref, &d, w, h, thr_cfg.eps);
                t.record(
                    got.candidates() == want.as_slice() && got_t.candidates() == want_t.as_slice(),
                );
            }
        }
    }
    t.note("band b=1 and threshold eps=0.05 against exhaustive scans")
}

fn sparsity_bound(rng: &mut impl Rng) -> Tally {
    let g = EquirectGrid::new(512, 128).expect("valid grid");
    let masker = EpipolarMasker::new(g, MaskConfig::default()).expect("valid config");
    let hw = g.pixel_count() as f64;
    let mut sum = 0.0;
    let mut t = Tally::default();
    for _ in 0..100 {
        let (pm, pn) = random_pair(rng);
        let m = masker
            .mask(&essential(&pm, &pn), random_center(rng, &g))
            .expect("in range");
        sum += m.len() as f64 / hw;
        t.record(m.len() <= 3 * 512);
    }
    let mean = sum / 100.0;
    t.record(mean <= 3.0 / 128.0);
    t.note(format!("mean M/HW {mean:.5} (bound {:.5})", 3.0 / 128.0))
}

fn masked_vs_full(rng: &mut impl Rng) -> Tally {
    let mut t = Tally::default();
    let c = 4;
    for frames in 1..=3 {
        for _ in 0..2 {
            let feats: Vec<FeatureGrid> = (0..frames)
                .map(|_| FeatureGrid::from_fn(16, 64, c, |_, _, _| rng.random_range(-1.0..1.0)))
                .collect();
            let params = random_params(c, rng);
            let kv: Vec<&FeatureGrid> = feats.iter().collect();
            let lists = CandidateLists::full(1024, 1024 * frames);
            let masked = masked_attention(&feats[0], &kv, &lists, &params).expect("shapes agree");
            let full = full_attention(&feats[0], &kv, &params).expect("shapes agree");
            let diff = masked
                .features
                .data()
                .iter()
                .zip(full.features.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            t.within(diff, 1e-12);
        }
    }
    t.worst_note("max difference")
}

fn cost_exactness(rng: &mut impl Rng) -> Tally {
    let mut t = Tally::default();
    let (h, w, c) = (2usize, 4usize, 2usize);
    let hw = (h * w) as u64;
    let params = AttentionParams::identity(c);
    for n in 1..=10usize {
        let feats: Vec<FeatureGrid> = (0..n)
            .map(|_| FeatureGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)))
            .collect();
        let dense = dense_schedule(n);
        let sparse = sparse_schedule(n, 2).expect("window 2");
        let dense_pairs = (n * (n - 1)) as u64;
        let sparse_pairs = if n >= 2 { 2 * n as u64 - 3 } else { 0 };
        for (s, pairs) in [(&dense, dense_pairs), (&sparse, sparse_pairs)] {
            let out =
                interframe_attention(&feats, s, KeySelection::Full, &params).expect("shapes agree");
            let model =
                cost_model(h, w, c, s.as_slice(), &CandidateModel::Full).expect("positive dims");
            t.record(
                s.pair_count() as u64 == pairs
                    && out.stats.score_evals == pairs * hw * hw
                    && model.score_evals == out.stats.score_evals
                    && model.softmax_count == out.stats.softmax_count
                    && model.projection_macs == out.stats.projection_macs
                    && model.score_macs == out.stats.score_macs,
            );
        }
    }
    // epipolar masks: measured candidate totals against instrumented counters
    let g = EquirectGrid::new(16, 8).expect("valid grid");
    for n in 1..=5 {
        let traj = bench_trajectory(n, rng);
        let s = sparse_schedule(n, 2).expect("window 2");
        let masks =
            build_frame_masks(&traj, &s, &g, &MaskConfig::default()).expect("distinct poses");
        let feats: Vec<FeatureGrid> = (0..n)
            .map(|_| FeatureGrid::from_fn(8, 16, c, |_, _, _| rng.random_range(-1.0..1.0)))
            .collect();
        let out = interframe_attention(&feats, &s, KeySelection::Epipolar(&masks), &params)
            .expect("shapes agree");
        let counts = masks.pair_counts(&s).expect("all pairs built");
        let model = cost_model(8, 16, c, s.as_slice(), &CandidateModel::PerFrame(counts))
            .expect("positive dims");
        let direct: u64 = masks.pairs().map(|(_, p)| p.nnz() as u64).sum();
        t.record(
            model.score_evals == out.stats.score_evals
                && direct == out.stats.score_evals
                && model.empty_queries == out.stats.empty_queries
                && model.max_softmax == out.stats.max_softmax,
        );
    }
    t.note("dense N(N-1) and sparse 2N-3 pair forms, N = 1..10")
}

fn scaling_trend(seed: u64) -> Tally {
    let mut t = Tally::default();
    let spec = BenchSpec {
        frames: vec![10, 20, 30],
        grid: EquirectGrid::new(64, 16).expect("valid grid"),
        channels: 8,
        band: 1,
        window: 2,
        reps: 3,
        seed,
        cap: u64::MAX,
        full: false,
        min_batch_seconds: 0.25,
    };
    let rows = match run_bench(&spec) {
        Ok(r) => r,
        Err(e) => return t.note(format!("bench failed: {e}")),
    };
    for r in &rows {
        t.record(r.pairs == r.expected_pairs);
    }
    let pairs = |r: &crate::bench::BenchRow| Some(r.pairs as f64);
    let secs = |r: &crate::bench::BenchRow| r.median_seconds;
    let dense_pairs = ratio(&rows, "dense", pairs).unwrap_or(0.0);
    let sparse_pairs = ratio(&rows, "sparse", pairs).unwrap_or(0.0);
    t.record(dense_pairs == (30.0 * 29.0) / (10.0 * 9.0));
    t.record(sparse_pairs == (2.0 * 30.0 - 3.0) / (2.0 * 10.0 - 3.0));
    let dense_time = ratio(&rows, "dense", secs).unwrap_or(0.0);
    let sparse_time = ratio(&rows, "sparse", secs).unwrap_or(f64::INFINITY);
    t.record(dense_time > 4.0);
    t.record(sparse_time < 4.0);
    t.note(format!(
        "pairs dense {dense_pairs:.2} sparse {sparse_pairs:.2}; time dense {dense_time:.2} sparse {sparse_time:.2}"
    ))
}

fn field_config(res: usize, channels: usize) -> TriplaneConfig {
    TriplaneConfig {
        extents: TriplaneExtents {
            x: Extent::new(-20.0, 20.0).expect("ordered"),
            y: Extent::new(-20.0, 20.0).expect("ordered"),
            z: Extent::new(-8.0, 12.0).expect("ordered"),
        },
        resolution: res,
        channels,
    }
}

fn random_triplane(rng: &mut impl Rng, config: &TriplaneConfig) -> Triplane {
    Triplane::from_fn(config, |_, _, _, _| rng.random_range(-1.0..1.0)).expect("valid config")
}

fn triplane_aggregation(rng: &mut impl Rng, corrupt: Option<usize>) -> Tally {
    let mut t = Tally::default();
    let cfg = TriplaneConfig {
        extents: TriplaneExtents::default(),
        resolution: 17,
        channels: 4,
    };
    let a = random_triplane(rng, &cfg);
    let b = random_triplane(rng, &cfg);
    let e = cfg.extents;
    let node = |axis: usize, i: usize| {
        let ext = e.axis(axis);
        ext.min + i as f64 * (ext.max - ext.min) / 16.0
    };
    // grid nodes reproduce the stored features exactly
    for _ in 0..200 {
        let (i, j, k) = (
            rng.random_range(0..17),
            rng.random_range(0..17),
            rng.random_range(0..17),
        );
        let x = Vector3::new(node(0, i), node(1, j), node(2, k));
        let got = sample_3d(&a, &x).expect("inside extents");
        let want: Vec<f64> = (0..4)
            .map(|ch| {
                a.plane(PlaneAxis::XY).features().at(j, i)[ch]
                    + a.plane(PlaneAxis::XZ).features().at(k, i)[ch]
                    + a.plane(PlaneAxis::YZ).features().at(k, j)[ch]
            })
            .collect();
        t.within(max_diff(&got, &want), 1e-12);
    }
    let sum = a.add(&b).expect("same layout");
    let alpha = rng.random_range(-3.0..3.0);
    let scaled = Triplane::from_fn(&cfg, |axis, r, c, ch| {
        alpha * a.plane(axis).features().at(r, c)[ch]
    })
    .expect("valid config");
    for _ in 0..1000 {
        let x = Vector3::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(0.0..50.0),
        );
        let (sa, sb) = (
            sample_3d(&a, &x).expect("inside"),
            sample_3d(&b, &x).expect("inside"),
        );
        let lin = max_diff(&sample_3d(&sum, &x).expect("inside"), &add(&sa, &sb)).max(max_diff(
            &sample_3d(&scaled, &x).expect("inside"),
            &sa.iter().map(|v| alpha * v).collect::<Vec<_>>(),
        ));
        let mut oracle = vec![0.0; 4];
        for axis in PlaneAxis::ALL {
            let (p, q) = axis.axes();
            let (ep, eq) = (e.axis(p), e.axis(q));
            let gx = (x[p] - ep.min) / (ep.max - ep.min) * 16.0;
            let gy = (x[q] - eq.min) / (eq.max - eq.min) * 16.0;
            oracle = add(&oracle, &bilinear_oracle(a.plane(axis).features(), gx, gy));
        }
        t.within(lin.max(max_diff(&sa, &oracle)), 1e-12);
    }
    // file round trip of f32-exact values
    let small = Triplane::from_fn(&field_config(5, 3), |_, _, _, _| {
        rng.random_range(-1.0f32..1.0) as f64
    })
    .expect("valid config");
    let mut buf = Vec::new();
    write_triplane(&small, &mut buf).expect("in-memory write");
    if let Some(i) = corrupt {
        let i = i % buf.len();
        buf[i] ^= 0x5a;
    }
    t.record(read_triplane(buf.as_slice()).is_ok_and(|back| back == small));
    t.worst_note("max error")
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR)
}

/// Distance, in grid cells, from `x` to the nearest cell edge of any plane.
fn edge_margin(tp: &Triplane, x: &Vector3<f64>) -> f64 {
    PlaneAxis::ALL
        .iter()
        .flat_map(|&axis| {
            let (gx, gy) = tp.plane(axis).to_grid(axis.project(x));
            [gx, gy]
        })
        .map(|g| (g - g.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

fn gradient_checks(rng: &mut impl Rng) -> Tally {
    let mut t = Tally::default();
    let cfg = field_config(9, 3);
    let tp = random_triplane(rng, &cfg);

    // bilinear planes
    for _ in 0..500 {
        let axis = PlaneAxis::ALL[rng.random_range(0..3)];
        let plane = tp.plane(axis);
        let (r, c) = (rng.random_range(0..8), rng.random_range(0..8));
        let [a0, b0] = plane.node_coords(r, c);
        let [a1, b1] = plane.node_coords(r + 1, c + 1);
        let p = [
            a0 + (a1 - a0) * rng.random_range(0.05..0.95),
            b0 + (b1 - b0) * rng.random_range(0.05..0.95),
        ];
        let g = bilinear_grad(plane, p).expect("inside");
        let mut err: f64 = 0.0;
        for (dim, an) in [(0, &g.d_first), (1, &g.d_second)] {
            let (mut hi, mut lo) = (p, p);
            hi[dim] += FD_STEP;
            lo[dim] -= FD_STEP;
            let (fh, fl) = (
                plane.sample(hi).expect("inside"),
                plane.sample(lo).expect("inside"),
            );
            for ch in 0..3 {
                err = err.max(rel_err((fh[ch] - fl[ch]) / (2.0 * FD_STEP), an[ch]));
            }
        }
        t.within(err, 1e-4);
    }

    // ray attention, logits and both offset parameterizations
    let g = EquirectGrid::new(64, 32).expect("valid grid");
    let rc = RaySampleConfig {
        samples: 4,
        near: 1.0,
        far: 8.0,
        heads: 2,
    };
    let mut ray_cases = 0;
    while ray_cases < 500 {
        let pose = Pose4DoF::new(
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                1.6,
            ),
            rng.random_range(-PI..PI),
        )
        .to_se3();
        let px = (rng.random_range(0.0..64.0), rng.random_range(8.0..24.0));
        let along = ray_cases % 2 == 0;
        let mut p = RayAttentionParams::initial(&rc, along);
        p.logits
            .iter_mut()
            .for_each(|l| *l = rng.random_range(-2.0..2.0));
        p.offsets = if along {
            Offsets::AlongRay((0..8).map(|_| rng.random_range(-0.5..0.5)).collect())
        } else {
            Offsets::Free(
                (0..8)
                    .map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)))
                    .collect(),
            )
        };
        let Ok(tr) = trace_ray_attention(&tp, &pose, px, &g, &rc, &p) else {
            continue;
        };
        let interior = tr
            .offsets
            .iter()
            .enumerate()
            .all(|(i, o)| edge_margin(&tp, &(tr.points[i / 2] + o)) > 1e-3);
        if !interior {
            continue;
        }
        ray_cases += 1;
        let jac = ray_attention_grad(&tp, &pose, px, &g, &rc, &p).expect("inside");
        let eval = |q: &RayAttentionParams| {
            ray_pixel_attention(&tp, &pose, px, &g, &rc, q).expect("inside")
        };
        let central = |a: &RayAttentionParams, b: &RayAttentionParams| -> Vec<f64> {
            let (fa, fb) = (eval(a), eval(b));
            fa.iter()
                .zip(&fb)
                .map(|(x, y)| (x - y) / (2.0 * FD_STEP))
                .collect()
        };
        let mut err: f64 = 0.0;
        for i in 0..8 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.logits[i] += FD_STEP;
            b.logits[i] -= FD_STEP;
            for (ch, fd) in central(&a, &b).into_iter().enumerate() {
                err = err.max(rel_err(fd, jac.d_logits[i][ch]));
            }
            match &p.offsets {
                Offsets::AlongRay(o) => {
                    let (mut oa, mut ob) = (o.clone(), o.clone());
                    oa[i] += FD_STEP;
                    ob[i] -= FD_STEP;
                    let (mut a, mut b) = (p.clone(), p.clone());
                    a.offsets = Offsets::AlongRay(oa);
                    b.offsets = Offsets::AlongRay(ob);
                    let an = jac.d_along_ray(i);
                    for (ch, fd) in central(&a, &b).into_iter().enumerate() {
                        err = err.max(rel_err(fd, an[ch]));
                    }
                }
                Offsets::Free(o) => {
                    for dim in 0..3 {
                        let (mut oa, mut ob) = (o.clone(), o.clone());
                        oa[i][dim] += FD_STEP;
                        ob[i][dim] -= FD_STEP;
                        let (mut a, mut b) = (p.clone(), p.clone());
                        a.offsets = Offsets::Free(oa);
                        b.offsets = Offsets::Free(ob);
                        for (ch, fd) in central(&a, &b).into_iter().enumerate() {
                            err = err.max(rel_err(fd, jac.d_offsets[i][ch][dim]));
                        }
                    }
                }
            }
        }
        t.within(err, 1e-4);
    }
    t.worst_note("max relative error")
}

fn ray_normalization(rng: &mut impl Rng) -> Tally {
    let mut t = Tally::default();
    for case in 0..1000 {
        let rc = RaySampleConfig {
            samples: rng.random_range(1..9),
            near: 1.0,
            far: 10.0,
            heads: rng.random_range(1..5),
        };
        let mut p = RayAttentionParams::initial(&rc, false);
        let scale = if case % 4 == 0 { 700.0 } else { 5.0 };
        p.logits
            .iter_mut()
            .for_each(|l| *l = rng.random_range(-scale..scale));
        let a = p.attention_weights();
        let worst = (0..rc.heads)
            .map(|j| ((0..rc.samples).map(|k| a[k * rc.heads + j]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        t.within(worst, 1e-12);
    }
    let cfg = field_config(9, 3);
    let tp = random_triplane(rng, &cfg);
    let g = EquirectGrid::new(64, 32).expect("valid grid");
    let rc = RaySampleConfig {
        samples: 1,
        near: 3.0,
        far: 4.0,
        heads: 1,
    };
    let mut p = RayAttentionParams::initial(&rc, false);
    p.head_weights = HeadWeights::Scalar(vec![1.0]);
    for _ in 0..200 {
        let yaw = rng.random_range(-PI..PI);
        let c = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            1.6,
        );
        let px = (rng.random_range(0.0..64.0), rng.random_range(0.0..32.0));
        let pose = Pose4DoF::new(c, yaw).to_se3();
        let got = ray_pixel_attention(&tp, &pose, px, &g, &rc, &p).expect("inside");
        let x = c + rot_z(yaw) * pixel_dir(px.0, px.1, 64, 32) * 3.0;
        t.within(max_diff(&got, &sample_3d(&tp, &x).expect("inside")), 1e-12);
    }
    t.worst_note("max error")
}

fn epipole_property(rng: &mut impl Rng) -> Tally {
    let g = EquirectGrid::new(512, 128).expect("valid grid");
    let mut t = Tally::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (pm, pn) = random_pair(rng);
        let rel = relative_pose(&pm.to_se3(), &pn.to_se3());
        let e = EssentialMatrix::new(&rel).expect("nonzero baseline");
        let eps = epipoles(&rel, &g).expect("nonzero baseline");
        let toward = look_at(&pn.translation, pn.yaw(), &pm.translation);
        let oracle = [dir_pixel(&toward, 512, 128), dir_pixel(&-toward, 512, 128)];
        let located = oracle
            .iter()
            .all(|o| eps.iter().any(|ep| wrap_dist(*o, *ep, 512.0) < 1e-6));
        let q = random_center(rng, &g);
        let curve = epipolar_curve(q, &e, &g).expect("in range");
        let ok = match &curve {
            EpipolarCurve::EpipoleQuery => false,
            EpipolarCurve::Traced {
                points,
                whole_columns,
            } => eps.iter().all(|&ep| {
                let d = points
                    .iter()
                    .map(|p| wrap_dist(*p, ep, 512.0))
                    .chain(
                        whole_columns
                            .iter()
                            .map(|&c| wrap_dist((c as f64 + 0.5, ep.1), ep, 512.0)),
                    )
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(d);
                d <= 1.0
            }),
        };
        t.record(located && ok);
    }
    t.note(format!("max curve-to-epipole distance {worst:.3} px"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_pixel_mapping_inverts() {
        for (u, v) in [(0.5, 0.5), (255.5, 63.5), (511.5, 127.5)] {
            let (u2, v2) = dir_pixel(&pixel_dir(u, v, 512, 128), 512, 128);
            assert!(wrap_dist((u, v), (u2, v2), 512.0) < 1e-9);
        }
    }

    #[test]
    fn cheap_criteria_pass() {
        let cfg = CheckConfig::default();
        for id in [1, 2, 4, 10, 11] {
            let r = run_check(id, &cfg);
            assert!(r.ok(), "{}", r.line());
        }
    }

    #[test]
    fn corrupting_triplane_fails_aggregation_check() {
        let cfg = CheckConfig {
            seed: 3,
            corrupt_triplane_byte: Some(200),
        };
        let r = run_check(8, &cfg);
        assert!(!r.ok());
        assert_eq!(r.passed + 1, r.total);
    }
}
