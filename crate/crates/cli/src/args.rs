use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panoepi_core::camera::EquirectGrid;

#[derive(Debug, Parser)]
#[command(
    name = "panoepi",
    version,
    about = "Panorama epipolar masks, triplane tracing and attention benchmarks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Panorama grid as WIDTHxHEIGHT.
    #[arg(long, global = true, default_value = "512x128")]
    pub grid: EquirectGrid,
    /// Epipolar band half-width in rows.
    #[arg(long, global = true, default_value_t = 1)]
    pub band: usize,
    /// Residual threshold for threshold-mode masks.
    #[arg(long, global = true, default_value_t = 1e-3)]
    pub eps: f64,
    /// Frames attended by each frame under the sparse schedule.
    #[arg(long, global = true, default_value_t = 2)]
    pub window: usize,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for every randomized fixture.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Output file; stdout when omitted where that makes sense.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the epipolar curve of a query pixel between the first two poses.
    Epicurve(EpicurveArgs),
    /// Generate epipolar masks for a trajectory and write per-pair statistics.
    Mask(MaskArgs),
    /// Time masked interframe attention under sparse and dense schedules.
    Bench(BenchArgs),
    /// Print every intermediate of one ray-attention evaluation.
    Trace(TraceArgs),
    /// Run the built-in property and oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleKind {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Band,
    Threshold,
}

#[derive(Debug, Args)]
pub struct EpicurveArgs {
    /// Trajectory file; the first two frames are used.
    #[arg(long)]
    pub poses: PathBuf,
    /// Query pixel in the first frame, as U,V.
    #[arg(long, value_parser = parse_pair)]
    pub pixel: (f64, f64),
    /// Curve thickness in pixels.
    #[arg(long, default_value_t = 1)]
    pub thickness: usize,
    /// Also shade the candidate mask of the query.
    #[arg(long)]
    pub show_mask: bool,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Trajectory file (text or JSON).
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long, value_enum, default_value_t = ScheduleKind::Sparse)]
    pub schedule: ScheduleKind,
    #[arg(long, value_enum, default_value_t = ModeArg::Band)]
    pub mode: ModeArg,
    /// Halve the grid this many times before generating masks.
    #[arg(long, default_value_t = 0)]
    pub level: u32,
    /// Warn about consecutive frames closer than this, meters.
    #[arg(long, default_value_t = 8.0)]
    pub min_spacing: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Frame counts to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    pub frames: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Largest score buffer (elements) a single frame may materialize.
    #[arg(long, default_value_t = 1 << 28)]
    pub cap: u64,
    /// Use full cross-frame attention instead of epipolar masks.
    #[arg(long)]
    pub full: bool,
    /// Shortest wall time of one timed repetition, seconds.
    #[arg(long, default_value_t = 0.25)]
    pub min_batch_seconds: f64,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Triplane file; a seeded random triplane when omitted.
    #[arg(long)]
    pub triplane: Option<PathBuf>,
    /// Ray-attention parameter file; zero offsets and uniform weights when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Camera pose X,Y,Z,YAW (camera to world).
    #[arg(long, value_parser = parse_pose, default_value = "0,0,1.6,0")]
    pub pose: [f64; 4],
    /// Query pixel U,V; the grid center when omitted.
    #[arg(long, value_parser = parse_pair)]
    pub pixel: Option<(f64, f64)>,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1.0)]
    pub near: f64,
    #[arg(long, default_value_t = 100.0)]
    pub far: f64,
    /// Random triplane resolution.
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    /// Random triplane channels.
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run only these criteria, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u32).range(1..=11))]
    pub only: Vec<u32>,
    /// Flip one byte of the serialized triplane in the round-trip check.
    #[arg(long, hide = true)]
    pub corrupt_triplane_byte: Option<usize>,
}

fn parse_numbers<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got {s:?}"));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|e| format!("bad number {p:?}: {e}"))?;
        if !o.is_finite() {
            return Err(format!("non-finite number {p:?}"));
        }
    }
    Ok(out)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    parse_numbers::<2>(s).map(|[a, b]| (a, b))
}

fn parse_pose(s: &str) -> Result<[f64; 4], String> {
    parse_numbers::<4>(s)
}
