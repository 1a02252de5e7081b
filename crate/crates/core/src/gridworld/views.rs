use rand::seq::SliceRandom;
use rand::Rng;

use super::{raycast_observe, GridError, GridMap, Observation, Pose, RaycastConfig};

/// Side of the square window (in cells, 8 m) used for environment-sampled views.
pub const ENV_WINDOW: usize = 20;

/// A registered view: an observation with the pose it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub obs: Observation,
    pub pose: Pose,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.views.iter().map(|v| v.pose).collect()
    }

    /// View indices sorted by pose, then observation fingerprint. Accumulating in
    /// this order makes set-valued computations independent of input order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.views.len()).collect();
        let keys: Vec<(Pose, u64)> = self.views.iter().map(|v| (v.pose, v.obs.fingerprint())).collect();
        idx.sort_by_key(|&i| keys[i]);
        idx
    }

    pub fn from_poses(map: &GridMap, poses: &[Pose], cfg: &RaycastConfig) -> ViewSet {
        ViewSet {
            views: poses.iter().map(|&pose| View { obs: raycast_observe(map, pose, cfg), pose }).collect(),
        }
    }
}

/// How registered views are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// `Some(k)`: k poses evenly spaced along the anchor path; `None`: every pose.
    FromPath(Option<usize>),
    /// Uniform random free poses in a window around the anchor path (or the whole map).
    FromEnv(usize),
}

impl std::fmt::Display for ViewMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViewMode::FromPath(Some(k)) => write!(f, "{k} from path"),
            ViewMode::FromPath(None) => write!(f, "all from path"),
            ViewMode::FromEnv(n) => write!(f, "{n} from env"),
        }
    }
}

/// Indices `round(i * (len - 1) / (k - 1))` for `i = 0..k`, ties to even.
/// Endpoints are always kept; `k >= len` keeps everything.
pub fn subsample_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 || k == 0 {
        return Vec::new();
    }
    if k >= len {
        return (0..len).collect();
    }
    if k == 1 {
        return vec![0];
    }
    let span = (len - 1) as f64;
    (0..k).map(|i| (i as f64 * span / (k - 1) as f64).round_ties_even() as usize).collect()
}

pub fn sample_view_set<R: Rng + ?Sized>(
    map: &GridMap,
    mode: ViewMode,
    rng: &mut R,
    anchor_path: Option<&[Pose]>,
    cfg: &RaycastConfig,
) -> Result<ViewSet, GridError> {
    let poses: Vec<Pose> = match mode {
        ViewMode::FromPath(k) => {
            let path = anchor_path.ok_or(GridError::MissingAnchorPath)?;
            if path.is_empty() {
                return Err(GridError::MissingAnchorPath);
            }
            let k = k.unwrap_or(path.len());
            subsample_indices(path.len(), k).into_iter().map(|i| path[i]).collect()
        }
        ViewMode::FromEnv(count) => {
            let (x0, y0, x1, y1) = match anchor_path {
                Some(path) if !path.is_empty() => window_around(map, path),
                _ => (0, 0, map.width(), map.height()),
            };
            let mut candidates = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    if map.is_free(x, y) {
                        for d in 0..4 {
                            candidates.push(Pose::new(x, y, d));
                        }
                    }
                }
            }
            if candidates.is_empty() {
                return Err(GridError::EmptyWindow);
            }
            if count <= candidates.len() {
                candidates.choose_multiple(rng, count).copied().collect()
            } else {
                (0..count).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect()
            }
        }
    };
    Ok(ViewSet::from_poses(map, &poses, cfg))
}

/// Half-open window `[x0, x1) x [y0, y1)` of at least `ENV_WINDOW` cells per side,
/// centered on the path's bounding box and clipped to the map.
fn window_around(map: &GridMap, path: &[Pose]) -> (usize, usize, usize, usize) {
    let min_x = path.iter().map(|p| p.x).min().unwrap();
    let max_x = path.iter().map(|p| p.x).max().unwrap();
    let min_y = path.iter().map(|p| p.y).min().unwrap();
    let max_y = path.iter().map(|p| p.y).max().unwrap();
    let span = |lo: usize, hi: usize, limit: usize| {
        let size = (hi + 1 - lo).max(ENV_WINDOW).min(limit);
        let center2 = lo + hi; // twice the center
        let start = (center2 + 1).saturating_sub(size) / 2;
        let start = start.min(limit - size);
        (start, start + size)
    };
    let (x0, x1) = span(min_x, max_x, map.width());
    let (y0, y1) = span(min_y, max_y, map.height());
    (x0, y0, x1, y1)
}
