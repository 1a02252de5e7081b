use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_map, free_labels, freespace_graph, map_views_graph, predict_freespace, Grid, MapperConfig, MapperError, MapperParams};
use crate::autograd::{AdamState, Graph, LrSchedule};
use crate::gridworld::{sample_view_set, GridMap, RaycastConfig, ViewMode};
use crate::metrics::average_precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperTrainConfig {
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
    /// Views per training sample, cycled.
    pub views: Vec<usize>,
    pub model: MapperConfig,
    pub clip: f64,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        MapperTrainConfig { seed: 0, iters: 600, lr: 2e-3, views: vec![10, 20], model: MapperConfig::default(), clip: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperTrainLog {
    pub losses: Vec<f64>,
}

/// Free-space cross-entropy over every cell of the environment.
pub fn train_mapper(envs: &[GridMap], cfg: &MapperTrainConfig) -> Result<(MapperParams, MapperTrainLog), MapperError> {
    assert!(!envs.is_empty(), "train_mapper needs at least one environment");
    let mut params = MapperParams::init(cfg.seed, cfg.model);
    let mut opt = AdamState::new();
    let sched = LrSchedule::thirds(cfg.lr, cfg.iters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_7070);
    let ray = RaycastConfig { rays: cfg.model.rays, ..RaycastConfig::default() };
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let map = &envs[rng.gen_range(0..envs.len())];
        let n = cfg.views[it % cfg.views.len()];
        let views = sample_view_set(map, ViewMode::FromEnv(n), &mut rng, None, &ray)?;
        let grid = Grid::full(map);
        let labels: Vec<f64> = free_labels(map, &grid).into_iter().map(|b| b as u8 as f64).collect();
        let mut g = Graph::new();
        let fused = map_views_graph(&mut g, &params, &views, &grid)?;
        let logits = freespace_graph(&mut g, &params.bundle, fused)?;
        let loss = g.bce_with_logits(logits, &labels)?;
        let lv = g.item(loss);
        if !lv.is_finite() {
            return Err(MapperError::Diverged { step: it, loss: lv });
        }
        g.backward(loss)?;
        let mut grads = g.param_grads();
        grads.clip_global_norm(cfg.clip);
        opt.step(&mut params.bundle, &grads, &sched);
        losses.push(lv);
        if it % 100 == 0 {
            log::info!("mapper step {it}: loss {lv:.4}");
        }
    }
    Ok((params, MapperTrainLog { losses }))
}

/// Evaluation view sets are prefixes of one pool, so larger sets contain smaller ones.
pub const EVAL_POOL: usize = 40;

/// Average precision of free-space prediction over all cells of all `envs`,
/// with `n_views` environment-sampled views each. The view sample of the `i`-th
/// environment is a prefix of a pool that depends only on `(seed, i)`.
pub fn eval_freespace_ap(params: &MapperParams, envs: &[GridMap], n_views: usize, seed: u64) -> Result<f64, MapperError> {
    let (scores, labels) = freespace_scores(params, envs, n_views, seed)?;
    Ok(average_precision(&scores, &labels))
}

/// Mean free-space cross-entropy on `envs` (same sampling as [`eval_freespace_ap`]).
pub fn eval_freespace_loss(params: &MapperParams, envs: &[GridMap], n_views: usize, seed: u64) -> Result<f64, MapperError> {
    let (scores, labels) = freespace_scores(params, envs, n_views, seed)?;
    let eps = 1e-12;
    let total: f64 = scores.iter().zip(&labels).map(|(p, &l)| if l { -(p + eps).ln() } else { -(1.0 - p + eps).ln() }).sum();
    Ok(total / scores.len() as f64)
}

fn freespace_scores(params: &MapperParams, envs: &[GridMap], n_views: usize, seed: u64) -> Result<(Vec<f64>, Vec<bool>), MapperError> {
    let ray = RaycastConfig { rays: params.cfg.rays, ..RaycastConfig::default() };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, map) in envs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut views = sample_view_set(map, ViewMode::FromEnv(n_views.max(EVAL_POOL)), &mut rng, None, &ray)?;
        views.views.truncate(n_views);
        let grid = Grid::full(map);
        let fused = build_map(params, &views, grid)?;
        scores.extend(predict_freespace(params, &fused)?);
        labels.extend(free_labels(map, &grid));
    }
    Ok((scores, labels))
}
