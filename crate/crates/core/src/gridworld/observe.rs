use super::{GridMap, Pose, TEXTURE_DIM};

pub const FOV_DEGREES: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaycastConfig {
    pub rays: usize,
    /// Maximum sensing depth, in cells.
    pub max_range: f64,
}

impl Default for RaycastConfig {
    fn default() -> Self {
        RaycastConfig { rays: 32, max_range: 20.0 }
    }
}

/// Egocentric depth and texture profile over a 60 degree field of view.
///
/// Ray `i` points at `heading - 30deg + 60deg * i / (R - 1)`, so ray 0 is the
/// rightmost. Depth is the distance along the heading axis from the agent's
/// cell center to the face of the hit cell, plus half a cell, so a wall `k`
/// cells straight ahead reads `k`. Depths are divided by `max_range` and
/// clamped to 1; rays with no hit in range read depth 1 and a zero texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub depths: Vec<f64>,
    pub texread: Vec<[f64; TEXTURE_DIM]>,
}

impl Observation {
    pub fn rays(&self) -> usize {
        self.depths.len()
    }

    pub fn flat_len(rays: usize) -> usize {
        rays * (TEXTURE_DIM + 1)
    }

    /// Per-ray interleaved `[depth, tex_0..tex_7]`, length `R * 9`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::flat_len(self.rays()));
        for (d, t) in self.depths.iter().zip(&self.texread) {
            out.push(*d);
            out.extend_from_slice(t);
        }
        out
    }

    pub fn zeros(rays: usize) -> Self {
        Observation { depths: vec![0.0; rays], texread: vec![[0.0; TEXTURE_DIM]; rays] }
    }

    /// FNV-1a over the bit patterns of the flattened observation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

pub fn raycast_observe(map: &GridMap, pose: Pose, cfg: &RaycastConfig) -> Observation {
    let heading = pose.d as f64 * std::f64::consts::FRAC_PI_2;
    let half = FOV_DEGREES.to_radians() / 2.0;
    let mut depths = Vec::with_capacity(cfg.rays);
    let mut texread = Vec::with_capacity(cfg.rays);
    for i in 0..cfg.rays {
        let offset = if cfg.rays == 1 { 0.0 } else { -half + 2.0 * half * i as f64 / (cfg.rays - 1) as f64 };
        match cast(map, pose, heading + offset, offset.cos(), cfg.max_range) {
            Some((z, (hx, hy))) => {
                depths.push((z / cfg.max_range).min(1.0));
                texread.push(*map.texture(hx, hy));
            }
            None => {
                depths.push(1.0);
                texread.push([0.0; TEXTURE_DIM]);
            }
        }
    }
    Observation { depths, texread }
}

/// Grid traversal from the agent's cell center. Returns the forward depth of
/// the first occupied cell and its coordinates.
fn cast(map: &GridMap, pose: Pose, angle: f64, cos_offset: f64, max_range: f64) -> Option<(f64, (usize, usize))> {
    let (dx, dy) = (angle.cos(), angle.sin());
    // Snap tiny components so axis-aligned rays do not drift across cell rows.
    let dx = if dx.abs() < 1e-12 { 0.0 } else { dx };
    let dy = if dy.abs() < 1e-12 { 0.0 } else { dy };
    let (mut cx, mut cy) = (pose.x as i64, pose.y as i64);
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx == 0.0 { f64::INFINITY } else { 1.0 / dx.abs() };
    let t_delta_y = if dy == 0.0 { f64::INFINITY } else { 1.0 / dy.abs() };
    let mut t_max_x = 0.5 * t_delta_x;
    let mut t_max_y = 0.5 * t_delta_y;
    loop {
        let t_enter;
        if t_max_x <= t_max_y {
            t_enter = t_max_x;
            t_max_x += t_delta_x;
            cx += step_x;
        } else {
            t_enter = t_max_y;
            t_max_y += t_delta_y;
            cy += step_y;
        }
        let z = t_enter * cos_offset + 0.5;
        if z > max_range {
            return None;
        }
        if !map.in_bounds(cx, cy) {
            return None;
        }
        if map.is_occupied(cx as usize, cy as usize) {
            return Some((z, (cx as usize, cy as usize)));
        }
    }
}
