//! Feature synthesis at unvisited poses from registered views, and the
//! discriminative pairing task used to train and evaluate it.
//!
//! Relative poses are expressed in the target's frame: `dy` counts cells
//! ahead, `dx` cells to the right.

mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{dense_layer, AutogradError, Graph, ParamBundle, Tensor, Var};
use crate::gridworld::{raycast_observe, GridMap, Observation, Pose, RaycastConfig, ViewSet, HEADING_DELTA};

pub use train::{
    eval_localization_ap, is_negative_pair, score_grid, train_synth, write_score_grid_csv, LocalizationEval, ScoreCell, SynthTrainConfig,
    SynthTrainLog,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("feature synthesis needs at least one view")]
    NoViews,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `std::io::Error` reduced to its message so the error stays comparable.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct IoError(pub String);

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(IoError(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelativePose {
    pub dx: i64,
    pub dy: i64,
    /// Heading of the view minus heading of the target, mod 4.
    pub dh: u8,
}

pub const REL_DIM: usize = 7;
const REL_SCALE: f64 = 8.0;

impl RelativePose {
    /// `[dx, dy, |(dx, dy)|]` scaled by 1/8, then the one-hot heading difference.
    pub fn encode(&self) -> [f64; REL_DIM] {
        let (dx, dy) = (self.dx as f64, self.dy as f64);
        let mut e = [0.0; REL_DIM];
        e[0] = dx / REL_SCALE;
        e[1] = dy / REL_SCALE;
        e[2] = dx.hypot(dy) / REL_SCALE;
        e[3 + self.dh as usize] = 1.0;
        e
    }

    /// World offset `view - target` recovered from the target's frame.
    pub fn world_offset(&self, target_heading: u8) -> (i64, i64) {
        let (fx, fy) = HEADING_DELTA[target_heading as usize];
        (self.dy * fx + self.dx * fy, self.dy * fy - self.dx * fx)
    }
}

/// Pose of `view` relative to `target`, in the target's frame.
pub fn relative_pose(view: Pose, target: Pose) -> RelativePose {
    let (wx, wy) = (view.x as i64 - target.x as i64, view.y as i64 - target.y as i64);
    let (fx, fy) = HEADING_DELTA[target.d as usize];
    RelativePose { dx: wx * fy - wy * fx, dy: wx * fx + wy * fy, dh: (view.d + 4 - target.d) % 4 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rays: usize,
    pub hidden: usize,
    pub feature: usize,
    pub omega_hidden: usize,
    pub pair_hidden: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { rays: 32, hidden: 128, feature: 32, omega_hidden: 64, pair_hidden: 64 }
    }
}

impl SynthConfig {
    pub fn obs_len(&self) -> usize {
        Observation::flat_len(self.rays)
    }
}

/// Weights under the `synth.` prefix: the view encoder `psi1..psi3`, the
/// fusion net `omega.*` and the pair classifier `pair.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub cfg: SynthConfig,
    pub bundle: ParamBundle,
}

impl SynthParams {
    pub fn init(seed: u64, cfg: SynthConfig) -> Self {
        let mut b = ParamBundle::new(seed);
        let (f, h) = (cfg.feature, cfg.omega_hidden);
        b.init_dense("synth.psi1", cfg.obs_len(), cfg.hidden);
        b.init_dense("synth.psi2", cfg.hidden, cfg.hidden / 2);
        b.init_dense("synth.psi3", cfg.hidden / 2, f);
        b.init_dense("synth.omega.e", f, h);
        b.init_uniform("synth.omega.r.w", &[h, REL_DIM], (6.0 / (REL_DIM + h) as f64).sqrt());
        b.init_dense("synth.omega.h2", h, h);
        b.init_dense("synth.omega.c", h, f);
        b.init_dense("synth.omega.l", h, 1);
        b.init_dense("synth.pair.a", f, cfg.pair_hidden);
        let s = (6.0 / (f + cfg.pair_hidden) as f64).sqrt();
        for name in ["synth.pair.b.w", "synth.pair.m.w", "synth.pair.d.w"] {
            b.init_uniform(name, &[cfg.pair_hidden, f], s);
        }
        b.init_dense("synth.pair.out", cfg.pair_hidden, 1);
        SynthParams { cfg, bundle: b }
    }
}

/// View encoder: `[N, R*9]` observations to `[N, F]` features.
pub fn encode_graph(g: &mut Graph, p: &ParamBundle, obs: Var) -> Result<Var, AutogradError> {
    let h = dense_layer(g, p, "synth.psi1", obs)?;
    let h = g.relu(h);
    let h = dense_layer(g, p, "synth.psi2", h)?;
    let h = g.relu(h);
    dense_layer(g, p, "synth.psi3", h)
}

/// Stacked flattened observations `[N, R*9]`.
pub fn obs_tensor(obs: &[&Observation]) -> Result<Tensor, AutogradError> {
    let len = obs.first().map(|o| o.flatten().len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(obs.len() * len);
    for o in obs {
        flat.extend(o.flatten());
    }
    Tensor::new(vec![obs.len(), len], flat)
}

/// Synthesized features `[J, F]` and view weights `[J, N]` at `targets`, from
/// view encodings `enc: [N, F]` taken at `view_poses`.
pub fn synth_graph(
    g: &mut Graph,
    p: &ParamBundle,
    enc: Var,
    view_poses: &[Pose],
    targets: &[Pose],
) -> Result<(Var, Var), SynthError> {
    let n = view_poses.len();
    if n == 0 {
        return Err(SynthError::NoViews);
    }
    let j = targets.len();
    let a = dense_layer(g, p, "synth.omega.e", enc)?;
    let h = g.shape(a)[1];
    let idx: Vec<usize> = (0..j).flat_map(|_| 0..n * h).collect();
    let tiled = g.gather(a, &idx)?;
    let tiled = g.reshape(tiled, &[j * n, h])?;
    let mut rel = Vec::with_capacity(j * n * REL_DIM);
    for &t in targets {
        for &v in view_poses {
            rel.extend(relative_pose(v, t).encode());
        }
    }
    let rel = g.constant(Tensor::new(vec![j * n, REL_DIM], rel)?);
    let rw = g.param(p, "synth.omega.r.w")?;
    let r = g.dense(rel, rw, None)?;
    let h1 = g.add(tiled, r)?;
    let h1 = g.relu(h1);
    let h2 = dense_layer(g, p, "synth.omega.h2", h1)?;
    let h2 = g.relu(h2);
    let contrib = dense_layer(g, p, "synth.omega.c", h2)?;
    let logits = dense_layer(g, p, "synth.omega.l", h2)?;
    let logits = g.reshape(logits, &[j, n])?;
    let weights = g.softmax(logits)?;
    let mut rows = Vec::with_capacity(j);
    for t in 0..j {
        let w = g.row(weights, t)?;
        let c = g.slice(contrib, t * n, n)?;
        rows.push(g.weighted_sum(w, c)?);
    }
    Ok((g.stack(&rows)?, weights))
}

/// Encodes a view set in canonical order; returns the encodings and the matching poses.
pub fn encode_views_graph(g: &mut Graph, p: &ParamBundle, views: &ViewSet) -> Result<(Var, Vec<Pose>), SynthError> {
    if views.is_empty() {
        return Err(SynthError::NoViews);
    }
    let order = views.canonical_order();
    let obs: Vec<&Observation> = order.iter().map(|&i| &views.views[i].obs).collect();
    let x = g.constant(obs_tensor(&obs)?);
    let enc = encode_graph(g, p, x)?;
    Ok((enc, order.iter().map(|&i| views.views[i].pose).collect()))
}

/// Synthesized features at each target, one row of length F per target.
pub fn synthesize_many(params: &SynthParams, views: &ViewSet, targets: &[Pose]) -> Result<Vec<Vec<f64>>, SynthError> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let (enc, poses) = encode_views_graph(&mut g, &params.bundle, views)?;
    let (f, _) = synth_graph(&mut g, &params.bundle, enc, &poses, targets)?;
    Ok(g.data(f).chunks(params.cfg.feature).map(<[f64]>::to_vec).collect())
}

pub fn synthesize(params: &SynthParams, views: &ViewSet, target: Pose) -> Result<Vec<f64>, SynthError> {
    Ok(synthesize_many(params, views, &[target])?.remove(0))
}

/// Softmax weight of every view when synthesizing at `target`, paired with its pose.
pub fn synthesis_weights(params: &SynthParams, views: &ViewSet, target: Pose) -> Result<Vec<(Pose, f64)>, SynthError> {
    let mut g = Graph::new();
    let (enc, poses) = encode_views_graph(&mut g, &params.bundle, views)?;
    let (_, w) = synth_graph(&mut g, &params.bundle, enc, &poses, &[target])?;
    Ok(poses.into_iter().zip(g.data(w).iter().copied()).collect())
}

/// Encoder features of observations.
pub fn encode_observations(params: &SynthParams, obs: &[&Observation]) -> Result<Vec<Vec<f64>>, SynthError> {
    if obs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let x = g.constant(obs_tensor(obs)?);
    let f = encode_graph(&mut g, &params.bundle, x)?;
    Ok(g.data(f).chunks(params.cfg.feature).map(<[f64]>::to_vec).collect())
}

/// Feature of what is actually observed at `pose`.
pub fn actual_feature(params: &SynthParams, map: &GridMap, pose: Pose) -> Result<Vec<f64>, SynthError> {
    let ray = RaycastConfig { rays: params.cfg.rays, ..RaycastConfig::default() };
    let obs = raycast_observe(map, pose, &ray);
    Ok(encode_observations(params, &[&obs])?.remove(0))
}

/// Pair-classifier logits `[B]` for synthesized `fhat: [B, F]` against actual `f: [B, F]`.
pub fn pair_graph(g: &mut Graph, p: &ParamBundle, fhat: Var, f: Var) -> Result<Var, AutogradError> {
    let a = dense_layer(g, p, "synth.pair.a", fhat)?;
    let bw = g.param(p, "synth.pair.b.w")?;
    let b = g.dense(f, bw, None)?;
    let prod = g.mul(fhat, f)?;
    let mw = g.param(p, "synth.pair.m.w")?;
    let m = g.dense(prod, mw, None)?;
    let diff = g.sub(fhat, f)?;
    let diff = g.abs(diff);
    let dw = g.param(p, "synth.pair.d.w")?;
    let d = g.dense(diff, dw, None)?;
    let h = g.add(a, b)?;
    let h = g.add(h, m)?;
    let h = g.add(h, d)?;
    let h = g.relu(h);
    let out = dense_layer(g, p, "synth.pair.out", h)?;
    let n = g.shape(out)[0];
    g.reshape(out, &[n])
}

/// Probability that `fhat` and `f` come from the same pose.
pub fn pair_score(params: &SynthParams, fhat: &[f64], f: &[f64]) -> Result<f64, SynthError> {
    let n = params.cfg.feature;
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, n], fhat.to_vec())?);
    let b = g.constant(Tensor::new(vec![1, n], f.to_vec())?);
    let l = pair_graph(&mut g, &params.bundle, a, b)?;
    let s = g.sigmoid(l);
    Ok(g.data(s)[0])
}

#[cfg(test)]
mod tests;
