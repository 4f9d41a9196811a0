use thiserror::Error;

use crate::triplane::PlaneAxis;

/// Errors produced by the geometry, sampling and attention kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid equirectangular grid {width}x{height}: {reason}")]
    InvalidGrid {
        width: usize,
        height: usize,
        reason: &'static str,
    },

    #[error("pixel ({u}, {v}) outside the {width}x{height} grid")]
    PixelOutOfRange {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("point coincides with the camera center; projection is undefined")]
    DegenerateProjection,

    #[error("zero baseline between frames {from} and {to}; the epipolar constraint is vacuous")]
    DegenerateBaseline { from: usize, to: usize },

    #[error("point ({a}, {b}) outside the extents of the {plane} plane")]
    OutOfExtent { plane: PlaneAxis, a: f64, b: f64 },

    #[error("ray sample k={k}, head j={j} falls outside the triplane: {source}")]
    RaySampleOutOfExtent {
        k: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("candidate index {index} out of bounds ({len} keys)")]
    CandidateOutOfBounds { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("grid {width}x{height} is not divisible by 2^{level}")]
    NotDivisible {
        width: usize,
        height: usize,
        level: u32,
    },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors that stem from degenerate camera geometry rather than
    /// bad input files or parameters.
    pub fn is_degenerate_geometry(&self) -> bool {
        matches!(
            self,
            Error::DegenerateBaseline { .. } | Error::DegenerateProjection
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
