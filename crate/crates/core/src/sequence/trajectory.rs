//! Camera trajectories and their text and JSON encodings.
//!
//! Text: one frame per line, `id x y z yaw_radians`, `#` starts a comment.
//!
//! JSON:
//!
//! ```json
//! {
//!   "extent": {"min": [-100.0, -100.0], "max": [100.0, 100.0]},
//!   "frames": [{"id": 0, "x": 0.0, "y": 0.0, "z": 1.6, "yaw": 0.0}]
//! }
//! ```

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Pose4DoF;
use crate::error::{Error, Result};

/// Spacing below which consecutive frames are flagged as nearly coincident.
pub const DEFAULT_MIN_SPACING: f64 = 8.0;

/// Axis-aligned world rectangle in the ground plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldRect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl WorldRect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        if !(min[0] < max[0] && min[1] < max[1]) || !min.iter().chain(&max).all(|v| v.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "empty extent {min:?}..{max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.min[0]..=self.max[0]).contains(&x) && (self.min[1]..=self.max[1]).contains(&y)
    }
}

/// Ordered camera poses with unique, increasing frame ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    ids: Vec<usize>,
    poses: Vec<Pose4DoF>,
    extent: Option<WorldRect>,
}

#[derive(Serialize, Deserialize)]
struct JsonFrame {
    id: usize,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonTrajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extent: Option<WorldRect>,
    frames: Vec<JsonFrame>,
}

impl Trajectory {
    pub fn new(frames: Vec<(usize, Pose4DoF)>, extent: Option<WorldRect>) -> Result<Self> {
        for w in frames.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidTrajectory(format!(
                    "frame ids must increase: {} follows {}",
                    w[1].0, w[0].0
                )));
            }
        }
        for (id, pose) in &frames {
            let t = pose.translation;
            if !(t.iter().all(|v| v.is_finite()) && pose.yaw().is_finite()) {
                return Err(Error::InvalidTrajectory(format!(
                    "frame {id} has a non-finite pose"
                )));
            }
            if let Some(ext) = &extent {
                if !ext.contains(t.x, t.y) {
                    return Err(Error::InvalidTrajectory(format!(
                        "frame {id} at ({}, {}) lies outside the extent",
                        t.x, t.y
                    )));
                }
            }
        }
        let (ids, poses) = frames.into_iter().unzip();
        Ok(Self { ids, poses, extent })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn poses(&self) -> &[Pose4DoF] {
        &self.poses
    }

    pub fn extent(&self) -> Option<&WorldRect> {
        self.extent.as_ref()
    }

    /// Consecutive frames closer than `min_spacing` meters, with their
    /// distance.
    pub fn close_pairs(&self, min_spacing: f64) -> Vec<(usize, usize, f64)> {
        self.poses
            .windows(2)
            .zip(self.ids.windows(2))
            .filter_map(|(p, id)| {
                let d = (p[1].translation - p[0].translation).norm();
                (d < min_spacing).then_some((id[0], id[1], d))
            })
            .collect()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut frames = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "line {}: expected `id x y z yaw`, got {} fields",
                    n + 1,
                    fields.len()
                )));
            }
            let id = fields[0]
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("line {}: bad id: {e}", n + 1)))?;
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse()
                    .map_err(|e| Error::Format(format!("line {}: bad number {f:?}: {e}", n + 1)))?;
            }
            frames.push((id, Pose4DoF::new(Vector3::new(v[0], v[1], v[2]), v[3])));
        }
        Self::new(frames, None)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# id x y z yaw\n");
        for (id, p) in self.ids.iter().zip(&self.poses) {
            let t = p.translation;
            writeln!(s, "{id} {:?} {:?} {:?} {:?}", t.x, t.y, t.z, p.yaw()).unwrap();
        }
        s
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let doc: JsonTrajectory = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("trajectory json: {e}")))?;
        if let Some(ext) = &doc.extent {
            WorldRect::new(ext.min, ext.max)?;
        }
        let frames = doc
            .frames
            .into_iter()
            .map(|f| (f.id, Pose4DoF::new(Vector3::new(f.x, f.y, f.z), f.yaw)))
            .collect();
        Self::new(frames, doc.extent)
    }

    pub fn to_json(&self) -> String {
        let doc = JsonTrajectory {
            extent: self.extent,
            frames: self
                .ids
                .iter()
                .zip(&self.poses)
                .map(|(&id, p)| JsonFrame {
                    id,
                    x: p.translation.x,
                    y: p.translation.y,
                    z: p.translation.z,
                    yaw: p.yaw(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("trajectory serializes")
    }

    /// Parses JSON when the text starts with `{`, the line format otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::parse_json(text)
        } else {
            Self::parse_text(text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_with_comments() {
        let t =
            Trajectory::parse_text("# header\n0 0 0 1.6 0\n\n 3 10 0 1.6 0.5 # moved\n").unwrap();
        assert_eq!(t.ids(), &[0, 3]);
        assert_eq!(t.poses()[1].translation, Vector3::new(10.0, 0.0, 1.6));
        assert_eq!(t.poses()[1].yaw(), 0.5);
    }

    #[test]
    fn text_errors() {
        assert!(Trajectory::parse_text("0 0 0 1.6").is_err());
        assert!(Trajectory::parse_text("0 0 0 1.6 x").is_err());
        assert!(Trajectory::parse_text("1 0 0 0 0\n1 5 0 0 0").is_err());
        assert!(Trajectory::parse_text("2 0 0 0 0\n1 5 0 0 0").is_err());
        assert!(Trajectory::parse_text("0 nan 0 0 0").is_err());
    }

    #[test]
    fn json_round_trip_and_extent() {
        let ext = WorldRect::new([-50.0, -50.0], [50.0, 50.0]).unwrap();
        let t = Trajectory::new(
            vec![
                (0, Pose4DoF::new(Vector3::new(0.0, 0.0, 1.6), 0.1)),
                (1, Pose4DoF::new(Vector3::new(12.5, -3.0, 1.6), -2.0)),
            ],
            Some(ext),
        )
        .unwrap();
        assert_eq!(Trajectory::parse(&t.to_json()).unwrap(), t);
        let outside = t.to_json().replace("12.5", "80.0");
        assert!(Trajectory::parse_json(&outside).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = Trajectory::parse_text("0 0.1 0.2 1.6 3.0\n1 1e-3 7 1.5 -1.25\n").unwrap();
        assert_eq!(Trajectory::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn close_pairs_flagged() {
        let t = Trajectory::parse_text("0 0 0 0 0\n1 3 4 0 0\n2 30 4 0 0\n").unwrap();
        assert_eq!(t.close_pairs(DEFAULT_MIN_SPACING), vec![(0, 1, 5.0)]);
    }
}
