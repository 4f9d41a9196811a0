use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use panoepi_core::camera::{pixel_to_angles, EquirectGrid, Pose4DoF};
use panoepi_core::epipolar::{
    epipolar_curve, epipoles, read_masks, relative_pose, write_masks, EpipolarMasker,
    EssentialMatrix, MaskConfig, MaskMode, PairMasks,
};
use panoepi_core::ray::{read_params, trace_ray_attention, RayAttentionParams, RaySampleConfig};
use panoepi_core::sequence::{
    dense_schedule, downscale_grid, sparse_schedule, PairStats, Trajectory,
};
use panoepi_core::triplane::{read_triplane, Triplane, TriplaneConfig};
use panoepi_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::args::{
    BenchArgs, EpicurveArgs, GlobalOpts, MaskArgs, ModeArg, ScheduleKind, SelftestArgs, TraceArgs,
};
use crate::bench::{ratio, run_bench, write_bench_csv, BenchSpec};
use crate::checks::{run_all, run_check, CheckConfig};
use crate::render::{render_curve, RenderSpec};

pub const MASK_CSV_HEADER: &str = "schema_version,query_frame,key_frame,queries,candidates,\
mean_m,max_m,sparsity,full_queries,empty_queries";

pub const CACHE_ENV: &str = "PANOEPI_CACHE_DIR";

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open_file(path: &Path) -> Result<io::BufReader<File>> {
    File::open(path)
        .map(io::BufReader::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::parse(&read_text(path)?)
}

fn mask_config(global: &GlobalOpts, mode: MaskMode) -> MaskConfig {
    MaskConfig {
        band_halfwidth: global.band,
        eps: global.eps,
        mode,
    }
}

pub fn epicurve(global: &GlobalOpts, args: &EpicurveArgs) -> Result<i32> {
    let traj = load_trajectory(&args.poses)?;
    if traj.len() < 2 {
        return Err(Error::InvalidTrajectory(
            "epicurve needs at least two frames".into(),
        ));
    }
    let grid = global.grid;
    pixel_to_angles(args.pixel.0, args.pixel.1, &grid)?;
    let (pm, pn) = (traj.poses()[0].to_se3(), traj.poses()[1].to_se3());
    let rel = relative_pose(&pm, &pn);
    let e = EssentialMatrix::between(&rel, traj.ids()[0], traj.ids()[1])?;
    let curve = epipolar_curve(args.pixel, &e, &grid)?;
    let eps = epipoles(&rel, &grid)?;
    let mask = if args.show_mask {
        let masker = EpipolarMasker::new(grid, mask_config(global, MaskMode::Band))?;
        Some(masker.mask(&e, args.pixel)?)
    } else {
        None
    };
    let spec = RenderSpec {
        thickness: args.thickness,
        ..RenderSpec::default()
    };
    let canvas = render_curve(
        &grid,
        &curve,
        &eps,
        mask.as_ref().map(|m| m.candidates()),
        &spec,
    )?;
    let mut out = output(global.out.as_deref())?;
    canvas.write_ppm(&mut out)?;
    out.flush()?;
    Ok(0)
}

/// Cache file name for the masks of one relative pose.
pub fn cache_key(grid: &EquirectGrid, cfg: &MaskConfig, e: &EssentialMatrix) -> String {
    let mut h = Sha256::new();
    h.update((grid.width() as u64).to_le_bytes());
    h.update((grid.height() as u64).to_le_bytes());
    h.update((cfg.band_halfwidth as u64).to_le_bytes());
    h.update([matches!(cfg.mode, MaskMode::Threshold) as u8]);
    h.update(cfg.eps.to_bits().to_le_bytes());
    let rel = e.relative();
    for v in rel.rotation.iter().chain(rel.translation.iter()) {
        h.update(v.to_bits().to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("{hex}.epmk")
}

fn cached_masks(
    dir: Option<&Path>,
    masker: &EpipolarMasker,
    e: &EssentialMatrix,
) -> Result<PairMasks> {
    let Some(dir) = dir else {
        return PairMasks::build(masker, e);
    };
    let path = dir.join(cache_key(masker.grid(), masker.config(), e));
    if let Ok(bytes) = fs::read(&path) {
        match read_masks(bytes.as_slice()) {
            Ok(m) if m.grid() == masker.grid() => return Ok(m),
            _ => eprintln!(
                "warning: ignoring unreadable cache entry {}",
                path.display()
            ),
        }
    }
    let masks = PairMasks::build(masker, e)?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut buf = Vec::new();
    write_masks(&masks, &mut buf)?;
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, &path)?;
    Ok(masks)
}

pub fn mask(global: &GlobalOpts, args: &MaskArgs) -> Result<i32> {
    let traj = load_trajectory(&args.trajectory)?;
    for (a, b, d) in traj.close_pairs(args.min_spacing) {
        eprintln!("warning: frames {a} and {b} are only {d:.2} m apart");
    }
    let schedule = match args.schedule {
        ScheduleKind::Dense => dense_schedule(traj.len()),
        ScheduleKind::Sparse => sparse_schedule(traj.len(), global.window)?,
    };
    let grid = downscale_grid(&global.grid, args.level)?;
    let mode = match args.mode {
        ModeArg::Band => MaskMode::Band,
        ModeArg::Threshold => MaskMode::Threshold,
    };
    let masker = EpipolarMasker::new(grid, mask_config(global, mode))?;
    let cache_dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let poses: Vec<_> = traj.poses().iter().map(|p| p.to_se3()).collect();
    let ids = traj.ids();
    let pairs: Vec<(usize, usize)> = schedule.pairs().collect();
    let stats: Vec<PairStats> = pairs
        .par_iter()
        .map(|&(m, n)| {
            let rel = relative_pose(&poses[m], &poses[n]);
            let e = EssentialMatrix::between(&rel, ids[m], ids[n])?;
            let masks = cached_masks(cache_dir.as_deref(), &masker, &e)?;
            Ok(PairStats::of(ids[m], ids[n], &masks))
        })
        .collect::<Result<_>>()?;
    let mut out = output(global.out.as_deref())?;
    writeln!(out, "{MASK_CSV_HEADER}")?;
    for s in &stats {
        writeln!(
            out,
            "1,{},{},{},{},{:.6},{},{:.8},{},{}",
            s.query_frame,
            s.key_frame,
            s.queries,
            s.total,
            s.mean,
            s.max,
            s.sparsity,
            s.full_queries,
            s.empty_queries
        )?;
    }
    out.flush()?;
    Ok(0)
}

pub fn bench(global: &GlobalOpts, args: &BenchArgs) -> Result<i32> {
    let spec = BenchSpec {
        frames: args.frames.clone(),
        grid: global.grid,
        channels: args.channels,
        band: global.band,
        window: global.window,
        reps: args.reps,
        seed: global.seed,
        cap: args.cap,
        full: args.full,
        min_batch_seconds: args.min_batch_seconds,
    };
    let rows = run_bench(&spec)?;
    let mut out = output(global.out.as_deref())?;
    write_bench_csv(&spec, &rows, &mut out)?;
    out.flush()?;
    for schedule in ["sparse", "dense"] {
        let pairs = ratio(&rows, schedule, |r| Some(r.pairs as f64));
        let time = ratio(&rows, schedule, |r| r.median_seconds);
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        eprintln!(
            "{schedule}: pair ratio {} time ratio {}",
            fmt(pairs),
            fmt(time)
        );
    }
    Ok(0)
}

fn random_triplane(cfg: &TriplaneConfig, seed: u64) -> Result<Triplane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Triplane::from_fn(cfg, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn trace(global: &GlobalOpts, args: &TraceArgs) -> Result<i32> {
    let grid = global.grid;
    let tp = match &args.triplane {
        Some(p) => read_triplane(open_file(p)?)?,
        None => random_triplane(
            &TriplaneConfig {
                resolution: args.resolution,
                channels: args.channels,
                ..TriplaneConfig::default()
            },
            global.seed,
        )?,
    };
    let params = match &args.params {
        Some(p) => read_params(open_file(p)?)?,
        None => RayAttentionParams::initial(
            &RaySampleConfig {
                samples: args.samples,
                heads: args.heads,
                near: args.near,
                far: args.far,
            },
            false,
        ),
    };
    let cfg = RaySampleConfig {
        samples: params.samples(),
        heads: params.heads(),
        near: args.near,
        far: args.far,
    };
    cfg.validate()?;
    let [x, y, z, yaw] = args.pose;
    let pose = Pose4DoF::new(Vector3::new(x, y, z), yaw).to_se3();
    let pixel = args
        .pixel
        .unwrap_or((grid.width() as f64 / 2.0, grid.height() as f64 / 2.0));
    let t = trace_ray_attention(&tp, &pose, pixel, &grid, &cfg, &params)?;

    let (k_n, j_n) = (cfg.samples, cfg.heads);
    let mut out = output(global.out.as_deref())?;
    writeln!(out, "pixel {} {}", pixel.0, pixel.1)?;
    writeln!(out, "samples {k_n} heads {j_n}")?;
    for (k, (r, p)) in t.depths.iter().zip(&t.points).enumerate() {
        writeln!(
            out,
            "sample {k} depth {r:.6} point {:.6} {:.6} {:.6}",
            p.x, p.y, p.z
        )?;
    }
    for j in 0..j_n {
        let a: Vec<f64> = (0..k_n).map(|k| t.weights[k * j_n + j]).collect();
        let sum: f64 = a.iter().sum();
        let list: Vec<String> = a.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "head {j} weights {} sum {sum:.12}", list.join(" "))?;
    }
    for k in 0..k_n {
        for j in 0..j_n {
            let o = t.offsets[k * j_n + j];
            writeln!(out, "offset {k} {j} {:.6} {:.6} {:.6}", o.x, o.y, o.z)?;
        }
    }
    let f: Vec<String> = t.feature.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(out, "feature {}", f.join(" "))?;
    out.flush()?;
    Ok(0)
}

pub fn selftest(global: &GlobalOpts, args: &SelftestArgs) -> Result<i32> {
    let cfg = CheckConfig {
        seed: global.seed,
        corrupt_triplane_byte: args.corrupt_triplane_byte,
    };
    let reports: Vec<_> = if args.only.is_empty() {
        run_all(&cfg)
    } else {
        args.only.iter().map(|&id| run_check(id, &cfg)).collect()
    };
    let mut out = output(global.out.as_deref())?;
    for r in &reports {
        writeln!(out, "{}", r.line())?;
    }
    let passed = reports.iter().filter(|r| r.ok()).count();
    writeln!(out, "{passed}/{} suites passed", reports.len())?;
    out.flush()?;
    Ok(if passed == reports.len() { 0 } else { 3 })
}
