//! Seedable grid world: poses, noisy discrete actions, ray-cast observations,
//! map generation and episode sampling.
//!
//! Conventions used across the crate:
//! - `x` grows east, `y` grows north, one cell is 40 cm.
//! - Heading `d` is 0 = East, 1 = North, 2 = West, 3 = South.
//! - Rotations change heading by one quarter turn; Forward moves one cell.

mod episode;
mod map;
mod observe;
mod pose;
mod views;

use rand::Rng;
use thiserror::Error;

pub use episode::{sample_episode, sample_goal_for_start, Episode};
pub use map::{generate_map, texture_code, EnvFile, GridMap, MapStyle, MIN_MAP_SIZE, TEXTURE_DIM};
pub use observe::{raycast_observe, Observation, RaycastConfig, FOV_DEGREES};
pub use pose::{Action, Heading, Pose, HEADING_DELTA};
pub use views::{sample_view_set, subsample_indices, View, ViewMode, ViewSet, ENV_WINDOW};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("map {width}x{height} is too small (minimum {min}x{min})")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("unknown map style {0:?} (expected rooms, maze or open)")]
    UnknownStyle(String),
    #[error("malformed environment: {0}")]
    Malformed(String),
    #[error("no free cell available in the sampling window")]
    EmptyWindow,
    #[error("view sampling from a path needs an anchor path")]
    MissingAnchorPath,
    #[error("no start/goal pair with distance in [{d_min}, {d_max}] after {tries} tries")]
    NoEpisode { d_min: u32, d_max: u32, tries: usize },
    #[error("pose ({x},{y},{d}) is not in free space")]
    PoseNotFree { x: usize, y: usize, d: u8 },
}

/// Actuation noise: Forward has no effect with probability `p_fail`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    pub p_fail: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { p_fail: 0.2 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel { p_fail: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub pose: Pose,
    pub forward_failed: bool,
    pub collided: bool,
}

/// Applies one action. Every Forward consumes exactly one uniform draw, so the
/// RNG stream does not depend on the outcome.
pub fn step<R: Rng + ?Sized>(map: &GridMap, pose: Pose, action: Action, noise: NoiseModel, rng: &mut R) -> StepOutcome {
    let unchanged = |forward_failed, collided| StepOutcome { pose, forward_failed, collided };
    match action {
        Action::Stay => unchanged(false, false),
        Action::RotateLeft => StepOutcome { pose: pose.rotate_left(), forward_failed: false, collided: false },
        Action::RotateRight => StepOutcome { pose: pose.rotate_right(), forward_failed: false, collided: false },
        Action::Forward => {
            let draw: f64 = rng.gen();
            if draw < noise.p_fail {
                return unchanged(true, false);
            }
            match pose.ahead() {
                Some((x, y)) if map.is_free(x, y) => StepOutcome {
                    pose: Pose { x, y, d: pose.d },
                    forward_failed: false,
                    collided: false,
                },
                _ => unchanged(false, true),
            }
        }
    }
}
