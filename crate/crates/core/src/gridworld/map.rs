use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GridError, Pose};

pub const TEXTURE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapStyle {
    Rooms,
    Maze,
    Open,
}

impl FromStr for MapStyle {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rooms" => Ok(MapStyle::Rooms),
            "maze" => Ok(MapStyle::Maze),
            "open" => Ok(MapStyle::Open),
            other => Err(GridError::UnknownStyle(other.to_string())),
        }
    }
}

impl fmt::Display for MapStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MapStyle::Rooms => "rooms",
            MapStyle::Maze => "maze",
            MapStyle::Open => "open",
        };
        f.write_str(s)
    }
}

/// Occupancy grid with a fixed random texture code on every obstacle cell.
///
/// Cell `(x, y)` is stored at `y * width + x`; `x` grows east and `y` north.
/// The map is immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    occ: Vec<bool>,
    tex: Vec<[f64; TEXTURE_DIM]>,
    texture_seed: u64,
}

/// Texture code of a cell: a pure function of the texture seed and the cell index.
pub fn texture_code(texture_seed: u64, cell_index: usize) -> [f64; TEXTURE_DIM] {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    rng.set_stream(cell_index as u64);
    let mut code = [0.0; TEXTURE_DIM];
    for c in code.iter_mut() {
        *c = rng.gen_range(-1.0..=1.0);
    }
    code
}

impl GridMap {
    /// Builds a map from raw occupancy. Border cells are forced to be occupied.
    pub fn from_occupancy(width: usize, height: usize, mut occ: Vec<bool>, texture_seed: u64) -> Result<Self, GridError> {
        if width < 3 || height < 3 {
            return Err(GridError::TooSmall { width, height, min: 3 });
        }
        if occ.len() != width * height {
            return Err(GridError::Malformed(format!(
                "occupancy has {} cells, expected {}x{}",
                occ.len(),
                width,
                height
            )));
        }
        for x in 0..width {
            occ[x] = true;
            occ[(height - 1) * width + x] = true;
        }
        for y in 0..height {
            occ[y * width] = true;
            occ[y * width + width - 1] = true;
        }
        let tex = occ
            .iter()
            .enumerate()
            .map(|(i, &o)| if o { texture_code(texture_seed, i) } else { [0.0; TEXTURE_DIM] })
            .collect();
        Ok(GridMap { width, height, occ, tex, texture_seed })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texture_seed(&self) -> u64 {
        self.texture_seed
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Out-of-bounds cells count as occupied.
    pub fn is_occupied(&self, x: usize, y: usize) -> bool {
        x >= self.width || y >= self.height || self.occ[self.index(x, y)]
    }

    pub fn is_free(&self, x: usize, y: usize) -> bool {
        !self.is_occupied(x, y)
    }

    pub fn pose_is_free(&self, pose: &Pose) -> bool {
        pose.d < 4 && self.is_free(pose.x, pose.y)
    }

    pub fn texture(&self, x: usize, y: usize) -> &[f64; TEXTURE_DIM] {
        &self.tex[self.index(x, y)]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occ
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_free(x, y) {
                    cells.push((x, y));
                }
            }
        }
        cells
    }

    pub fn free_fraction(&self) -> f64 {
        let free = self.occ.iter().filter(|o| !**o).count();
        free as f64 / self.occ.len() as f64
    }

    /// Copy of this map with one cell's occupancy changed. Textures stay a function of the seed.
    pub fn with_cell(&self, x: usize, y: usize, occupied: bool) -> Result<GridMap, GridError> {
        let mut occ = self.occ.clone();
        occ[self.index(x, y)] = occupied;
        GridMap::from_occupancy(self.width, self.height, occ, self.texture_seed)
    }

    /// Number of 4-connected components of free space.
    pub fn free_components(&self) -> usize {
        let mut seen = vec![false; self.occ.len()];
        let mut count = 0;
        for start in 0..self.occ.len() {
            if self.occ[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                for j in self.neighbors4(i) {
                    if !self.occ[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        count
    }

    fn neighbors4(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .into_iter()
            .filter_map(move |(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                self.in_bounds(nx, ny).then(|| ny as usize * self.width + nx as usize)
            })
    }

    /// Text rows, top row first (north up): `#` occupied, `.` free.
    pub fn rows(&self) -> Vec<String> {
        (0..self.height)
            .rev()
            .map(|y| (0..self.width).map(|x| if self.is_occupied(x, y) { '#' } else { '.' }).collect())
            .collect()
    }

    pub fn to_env_file(&self) -> EnvFile {
        EnvFile {
            width: self.width,
            height: self.height,
            rows: self.rows(),
            texture_seed: self.texture_seed,
        }
    }

    pub fn from_env_file(env: &EnvFile) -> Result<GridMap, GridError> {
        if env.rows.len() != env.height {
            return Err(GridError::Malformed(format!("{} rows for height {}", env.rows.len(), env.height)));
        }
        let mut occ = vec![false; env.width * env.height];
        for (r, row) in env.rows.iter().enumerate() {
            if row.chars().count() != env.width {
                return Err(GridError::Malformed(format!("row {r} has {} cells, expected {}", row.len(), env.width)));
            }
            let y = env.height - 1 - r;
            for (x, ch) in row.chars().enumerate() {
                occ[y * env.width + x] = match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(GridError::Malformed(format!("unexpected cell character {other:?}"))),
                };
            }
        }
        GridMap::from_occupancy(env.width, env.height, occ, env.texture_seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_env_file()).expect("env file serializes")
    }

    pub fn from_json(s: &str) -> Result<GridMap, GridError> {
        let env: EnvFile = serde_json::from_str(s).map_err(|e| GridError::Malformed(e.to_string()))?;
        GridMap::from_env_file(&env)
    }
}

/// On-disk environment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFile {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<String>,
    pub texture_seed: u64,
}

pub const MIN_MAP_SIZE: usize = 8;

/// Generates a closed world whose free space is one connected component.
pub fn generate_map(seed: u64, width: usize, height: usize, style: MapStyle) -> Result<GridMap, GridError> {
    if width < MIN_MAP_SIZE || height < MIN_MAP_SIZE {
        return Err(GridError::TooSmall { width, height, min: MIN_MAP_SIZE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occ = vec![false; width * height];
    match style {
        MapStyle::Open => {}
        MapStyle::Maze => carve_maze(&mut occ, width, height, &mut rng),
        MapStyle::Rooms => build_rooms(&mut occ, width, height, &mut rng),
    }
    let map = GridMap::from_occupancy(width, height, occ, seed)?;
    Ok(keep_largest_component(map))
}

fn carve_maze(occ: &mut [bool], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    occ.iter_mut().for_each(|c| *c = true);
    // Lattice of odd cells, spanning tree by randomized depth-first search.
    let cw = (w - 1) / 2;
    let ch = (h - 1) / 2;
    let mut visited = vec![false; cw * ch];
    let mut stack = vec![(0usize, 0usize)];
    visited[0] = true;
    occ[w + 1] = false;
    while let Some(&(cx, cy)) = stack.last() {
        let mut options: Vec<(usize, usize)> = Vec::with_capacity(4);
        if cx + 1 < cw && !visited[cy * cw + cx + 1] {
            options.push((cx + 1, cy));
        }
        if cx > 0 && !visited[cy * cw + cx - 1] {
            options.push((cx - 1, cy));
        }
        if cy + 1 < ch && !visited[(cy + 1) * cw + cx] {
            options.push((cx, cy + 1));
        }
        if cy > 0 && !visited[(cy - 1) * cw + cx] {
            options.push((cx, cy - 1));
        }
        match options.choose(rng) {
            None => {
                stack.pop();
            }
            Some(&(nx, ny)) => {
                visited[ny * cw + nx] = true;
                let (x0, y0) = (2 * cx + 1, 2 * cy + 1);
                let (x1, y1) = (2 * nx + 1, 2 * ny + 1);
                occ[y1 * w + x1] = false;
                occ[((y0 + y1) / 2) * w + (x0 + x1) / 2] = false;
                stack.push((nx, ny));
            }
        }
    }
    // A few extra openings so the maze has loops.
    let extra = (cw * ch) / 8;
    for _ in 0..extra {
        let x = rng.gen_range(1..w - 1);
        let y = rng.gen_range(1..h - 1);
        let horizontal = x % 2 == 0 && y % 2 == 1;
        let vertical = x % 2 == 1 && y % 2 == 0;
        if horizontal || vertical {
            occ[y * w + x] = false;
        }
    }
}

const MIN_ROOM: usize = 5;

fn build_rooms(occ: &mut [bool], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    divide(occ, w, (1, 1, w - 2, h - 2), rng, 0);
    // Scattered furniture blocks.
    let blocks = (w * h) / 120;
    for _ in 0..blocks {
        let bw = rng.gen_range(1..=2);
        let bh = rng.gen_range(1..=2);
        let x = rng.gen_range(2..w.saturating_sub(2 + bw).max(3));
        let y = rng.gen_range(2..h.saturating_sub(2 + bh).max(3));
        for yy in y..(y + bh).min(h - 1) {
            for xx in x..(x + bw).min(w - 1) {
                occ[yy * w + xx] = true;
            }
        }
    }
}

/// Recursive division of the interior rectangle (x0, y0, x1, y1), inclusive,
/// leaving a two-cell door in every wall.
fn divide(occ: &mut [bool], w: usize, rect: (usize, usize, usize, usize), rng: &mut ChaCha8Rng, depth: usize) {
    let (x0, y0, x1, y1) = rect;
    let rw = x1 + 1 - x0;
    let rh = y1 + 1 - y0;
    if depth > 6 {
        return;
    }
    let can_v = rw >= 2 * MIN_ROOM + 1;
    let can_h = rh >= 2 * MIN_ROOM + 1;
    if !can_v && !can_h {
        return;
    }
    let vertical = if can_v && can_h { rw > rh || (rw == rh && rng.gen_bool(0.5)) } else { can_v };
    if vertical {
        let wx = rng.gen_range(x0 + MIN_ROOM..=x1 - MIN_ROOM);
        let door = rng.gen_range(y0..y1);
        for y in y0..=y1 {
            if y != door && y != door + 1 {
                occ[y * w + wx] = true;
            }
        }
        divide(occ, w, (x0, y0, wx - 1, y1), rng, depth + 1);
        divide(occ, w, (wx + 1, y0, x1, y1), rng, depth + 1);
    } else {
        let wy = rng.gen_range(y0 + MIN_ROOM..=y1 - MIN_ROOM);
        let door = rng.gen_range(x0..x1);
        for x in x0..=x1 {
            if x != door && x != door + 1 {
                occ[wy * w + x] = true;
            }
        }
        divide(occ, w, (x0, y0, x1, wy - 1), rng, depth + 1);
        divide(occ, w, (x0, wy + 1, x1, y1), rng, depth + 1);
    }
}

/// Fills every free component except the largest.
fn keep_largest_component(map: GridMap) -> GridMap {
    let (w, h) = (map.width, map.height);
    let mut label = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    for start in 0..w * h {
        if map.occ[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in map.neighbors4(i) {
                if !map.occ[j] && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    if sizes.len() <= 1 {
        return map;
    }
    let best = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap();
    let occ = (0..w * h).map(|i| map.occ[i] || label[i] != best).collect();
    GridMap::from_occupancy(w, h, occ, map.texture_seed).expect("same dimensions")
}
