//! Spatial mapping from registered views: per-view egocentric prediction,
//! rigid warp into the world grid, confidence-weighted fusion and refinement.
//!
//! Ego frame: a `k x k` grid with the agent's cell at row `k-1`, column `k/2`,
//! facing up (decreasing row). Column `k/2 + l` is `l` cells to the agent's right.
//! Allocentric tensors are `[C+1, H, W]` with row `H-1-y` and column `x`
//! relative to the grid origin, so north is up. The last channel is confidence.

mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{dense_layer, AutogradError, Graph, Padding, ParamBundle, RigidTransform, Tensor, Var};
use crate::gridworld::{GridMap, Observation, Pose, ViewSet, HEADING_DELTA};

pub use train::{eval_freespace_ap, eval_freespace_loss, train_mapper, MapperTrainConfig, MapperTrainLog, EVAL_POOL};

pub const FUSE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapperError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("allocentric maps live on different grids: {0:?} vs {1:?}")]
    GridMismatch(Grid, Grid),
    #[error("fusion needs at least one map")]
    NoMaps,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperConfig {
    /// Side of the egocentric map, in cells.
    pub ego_size: usize,
    /// Feature channels, not counting confidence.
    pub channels: usize,
    pub rays: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig { ego_size: 16, channels: 8, rays: 32, hidden: 128, embed: 64 }
    }
}

impl MapperConfig {
    pub fn obs_len(&self) -> usize {
        Observation::flat_len(self.rays)
    }

    fn coarse(&self) -> usize {
        self.ego_size / 2
    }
}

/// World-aligned window: columns `x0..x0+width`, rows covering `y0..y0+height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn full(map: &GridMap) -> Grid {
        Grid { x0: 0, y0: 0, width: map.width(), height: map.height() }
    }

    /// Tensor `(row, col)` of a world cell, if inside.
    pub fn row_col(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.width || y >= self.y0 + self.height {
            return None;
        }
        Some((self.y0 + self.height - 1 - y, x - self.x0))
    }

    /// World cell of a tensor `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> (usize, usize) {
        (self.x0 + col, self.y0 + self.height - 1 - row)
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoMap {
    pub data: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlloMap {
    pub grid: Grid,
    pub data: Tensor,
}

impl AlloMap {
    pub fn confidence(&self) -> &[f64] {
        let plane = self.grid.cells();
        let c = self.data.shape()[0];
        &self.data.data()[(c - 1) * plane..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    pub cfg: MapperConfig,
    pub bundle: ParamBundle,
}

impl MapperParams {
    pub fn init(seed: u64, cfg: MapperConfig) -> Self {
        let mut b = ParamBundle::new(seed);
        let c1 = cfg.channels + 1;
        b.init_dense("psi1", cfg.obs_len(), cfg.hidden);
        b.init_dense("psi2", cfg.hidden, cfg.embed);
        b.init_dense("g", cfg.embed, c1 * cfg.coarse() * cfg.coarse());
        b.init_conv("phi", c1, c1, 3);
        b.init_conv("u", c1, cfg.channels, 3);
        b.init_conv("head", c1, 1, 3);
        log::debug!("mapper parameters: {}", b.count());
        MapperParams { cfg, bundle: b }
    }
}

/// Ego maps for a batch of flattened observations `[N, R*9]`.
pub fn ego_graph(g: &mut Graph, p: &ParamBundle, cfg: &MapperConfig, obs: Var) -> Result<Vec<Var>, AutogradError> {
    let n = g.shape(obs)[0];
    let h = dense_layer(g, p, "psi1", obs)?;
    let h = g.relu(h);
    let h = dense_layer(g, p, "psi2", h)?;
    let h = g.relu(h);
    let coarse = dense_layer(g, p, "g", h)?;
    let c1 = cfg.channels + 1;
    let phi_w = g.param(p, "phi.w")?;
    let phi_b = g.param(p, "phi.b")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = g.row(coarse, i)?;
        let r = g.reshape(r, &[c1, cfg.coarse(), cfg.coarse()])?;
        let up = g.upsample(r, 2)?;
        let m = g.conv2d(up, phi_w, Some(phi_b), 1, Padding::Same)?;
        let feat = g.slice(m, 0, cfg.channels)?;
        let conf = g.slice(m, cfg.channels, 1)?;
        let conf = g.sigmoid(conf);
        out.push(g.concat(&[feat, conf])?);
    }
    Ok(out)
}

/// Transform taking allocentric `(row, col)` to ego `(row, col)` for an agent at `pose`.
pub fn ego_transform(pose: Pose, grid: &Grid, ego_size: usize) -> RigidTransform {
    let (fx, fy) = HEADING_DELTA[pose.d as usize];
    let (fx, fy) = (fx as f64, fy as f64);
    let px = pose.x as f64 - grid.x0 as f64;
    let py = pose.y as f64 - grid.y0 as f64;
    let top = grid.height as f64 - 1.0 - py;
    let k = ego_size as f64;
    RigidTransform { cos: fy, sin: fx, t_row: k - 1.0 + fx * px - fy * top, t_col: (ego_size / 2) as f64 - fy * px - fx * top }
}

pub fn warp_graph(g: &mut Graph, ego: Var, pose: Pose, grid: &Grid) -> Result<Var, AutogradError> {
    let k = g.shape(ego)[1];
    let tf = ego_transform(pose, grid, k);
    g.bilinear_warp(ego, grid.height, grid.width, &tf)
}

fn bits_key(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Confidence-weighted average of feature channels (`ε` in the denominator), the
/// cell-wise maximum confidence, and the learned refinement `U`. Inputs are
/// accumulated in a canonical order, so the result does not depend on their order.
pub fn fuse_graph(g: &mut Graph, p: &ParamBundle, allos: &[Var]) -> Result<Var, AutogradError> {
    let first = *allos.first().ok_or_else(|| AutogradError::Shape { op: "fuse_maps", detail: "no maps".into() })?;
    let c1 = g.shape(first)[0];
    let c = c1 - 1;
    let mut order: Vec<(Vec<u64>, Var)> = allos.iter().map(|&v| (bits_key(g.value(v)), v)).collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let mut num = None;
    let mut den = None;
    let mut confs = Vec::with_capacity(order.len());
    for (_, a) in order {
        let feat = g.slice(a, 0, c)?;
        let conf = g.slice(a, c, 1)?;
        let wf = g.mul_bcast(feat, conf)?;
        num = Some(match num {
            None => wf,
            Some(acc) => g.add(acc, wf)?,
        });
        den = Some(match den {
            None => conf,
            Some(acc) => g.add(acc, conf)?,
        });
        confs.push(conf);
    }
    let den = g.add_scalar(den.unwrap(), FUSE_EPS);
    let avg = g.div_bcast(num.unwrap(), den)?;
    let stacked = g.concat(&confs)?;
    let agg = g.channel_max(stacked, confs.len())?;
    let u_in = g.concat(&[avg, agg])?;
    let uw = g.param(p, "u.w")?;
    let ub = g.param(p, "u.b")?;
    let refined = g.conv2d(u_in, uw, Some(ub), 1, Padding::Same)?;
    g.concat(&[refined, agg])
}

/// Free-space logits `[1, H, W]` from a fused map.
pub fn freespace_graph(g: &mut Graph, p: &ParamBundle, fused: Var) -> Result<Var, AutogradError> {
    let w = g.param(p, "head.w")?;
    let b = g.param(p, "head.b")?;
    g.conv2d(fused, w, Some(b), 1, Padding::Same)
}

/// Full mapping pass: ego prediction for every view, warp, fuse.
pub fn map_views_graph(g: &mut Graph, params: &MapperParams, views: &ViewSet, grid: &Grid) -> Result<Var, MapperError> {
    if views.is_empty() {
        return Err(MapperError::NoMaps);
    }
    let order = views.canonical_order();
    let len = params.cfg.obs_len();
    let mut flat = Vec::with_capacity(order.len() * len);
    for &i in &order {
        flat.extend(views.views[i].obs.flatten());
    }
    let obs = g.constant(Tensor::new(vec![order.len(), len], flat)?);
    let egos = ego_graph(g, &params.bundle, &params.cfg, obs)?;
    let mut allos = Vec::with_capacity(egos.len());
    for (e, &i) in egos.into_iter().zip(&order) {
        allos.push(warp_graph(g, e, views.views[i].pose, grid)?);
    }
    Ok(fuse_graph(g, &params.bundle, &allos)?)
}

pub fn encode_ego(params: &MapperParams, obs: &Observation) -> Result<EgoMap, MapperError> {
    let flat = obs.flatten();
    if flat.len() != params.cfg.obs_len() {
        return Err(AutogradError::Shape {
            op: "encode_ego",
            detail: format!("observation of {} values, expected {}", flat.len(), params.cfg.obs_len()),
        }
        .into());
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, flat.len()], flat)?);
    let e = ego_graph(&mut g, &params.bundle, &params.cfg, x)?;
    Ok(EgoMap { data: g.value(e[0]).clone() })
}

pub fn warp_to_allo(ego: &EgoMap, pose: Pose, grid: Grid) -> Result<AlloMap, MapperError> {
    let mut g = Graph::new();
    let e = g.constant(ego.data.clone());
    let a = warp_graph(&mut g, e, pose, &grid)?;
    Ok(AlloMap { grid, data: g.value(a).clone() })
}

pub fn fuse_maps(params: &MapperParams, allos: &[AlloMap]) -> Result<AlloMap, MapperError> {
    let first = allos.first().ok_or(MapperError::NoMaps)?;
    if let Some(bad) = allos.iter().find(|a| a.grid != first.grid) {
        return Err(MapperError::GridMismatch(first.grid, bad.grid));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = allos.iter().map(|a| g.constant(a.data.clone())).collect();
    let f = fuse_graph(&mut g, &params.bundle, &vars)?;
    Ok(AlloMap { grid: first.grid, data: g.value(f).clone() })
}

/// Per-cell free-space probability in tensor order (row-major, north up).
pub fn predict_freespace(params: &MapperParams, fused: &AlloMap) -> Result<Vec<f64>, MapperError> {
    let mut g = Graph::new();
    let f = g.constant(fused.data.clone());
    let l = freespace_graph(&mut g, &params.bundle, f)?;
    let p = g.sigmoid(l);
    Ok(g.data(p).to_vec())
}

/// Builds the fused map for a view set.
pub fn build_map(params: &MapperParams, views: &ViewSet, grid: Grid) -> Result<AlloMap, MapperError> {
    let mut g = Graph::new();
    let f = map_views_graph(&mut g, params, views, &grid)?;
    Ok(AlloMap { grid, data: g.value(f).clone() })
}

/// Ground-truth free-space labels in tensor order.
pub fn free_labels(map: &GridMap, grid: &Grid) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid.cells());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let (x, y) = grid.cell(r, c);
            out.push(map.is_free(x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests;
