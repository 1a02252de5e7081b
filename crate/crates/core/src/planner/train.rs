use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vin::{vin_graph, vin_logits_graph, vin_plan, VinParams, SLOT_ACTIONS};
use super::{expert_action_from, oracle_cost_to_go, oracle_plan_from, PathPlan, PlannerError};
use crate::autograd::{AdamState, Graph, LrSchedule};
use crate::gridworld::{sample_episode, sample_view_set, step, Episode, GridMap, NoiseModel, Pose, RaycastConfig, ViewMode, ViewSet};
use crate::mapper::{build_map, map_views_graph, train_mapper, Grid, MapperParams, MapperTrainConfig, EVAL_POOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerTrainConfig {
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
    /// Views per training sample, cycled.
    pub views: Vec<usize>,
    pub max_goal_distance: u32,
    /// Off-path poses added to each sample's labelled set.
    pub extra_poses: usize,
    pub clip: f64,
    /// Used when no pre-trained mapper is supplied.
    pub mapper: MapperTrainConfig,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        PlannerTrainConfig {
            seed: 0,
            iters: 300,
            lr: 1e-3,
            views: vec![5, 10, 20, 40],
            max_goal_distance: 20,
            extra_poses: 16,
            clip: 5.0,
            mapper: MapperTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerTrainLog {
    pub losses: Vec<f64>,
}

/// Joint training of mapper and planner: cross-entropy of the readout head
/// against expert actions, backpropagated through value iteration into the mapper.
pub fn train_mapper_planner(
    envs: &[GridMap],
    cfg: &PlannerTrainConfig,
    init_mapper: Option<&MapperParams>,
) -> Result<(MapperParams, VinParams, PlannerTrainLog), PlannerError> {
    assert!(!envs.is_empty(), "train_mapper_planner needs at least one environment");
    let mut mapper = match init_mapper {
        Some(m) => m.clone(),
        None => train_mapper(envs, &cfg.mapper)?.0,
    };
    let mut vin = VinParams::from_mapper(cfg.seed, &mapper);
    let (mut opt_m, mut opt_v) = (AdamState::new(), AdamState::new());
    let sched = LrSchedule::thirds(cfg.lr, cfg.iters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x706c_616e);
    let ray = RaycastConfig { rays: mapper.cfg.rays, ..RaycastConfig::default() };
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let map = &envs[rng.gen_range(0..envs.len())];
        let ep = sample_episode(map, 1, cfg.max_goal_distance, &mut rng)?;
        let ctg = oracle_cost_to_go(map, ep.goal)?;
        let path = oracle_plan_from(&ctg, map, ep.start)?;
        let n = cfg.views[it % cfg.views.len()];
        let views = sample_view_set(map, ViewMode::FromEnv(n), &mut rng, Some(&path.poses), &ray)?;
        let mut poses = path.poses.clone();
        poses.extend(nearby_poses(map, &path.poses, cfg.extra_poses, &mut rng, |p| ctg.finite(p).is_some()));
        let labels = poses.iter().map(|&p| expert_action_from(&ctg, map, p).map(|a| a.code())).collect::<Result<Vec<_>, _>>()?;

        let grid = Grid::full(map);
        let mut g = Graph::new();
        let fused = map_views_graph(&mut g, &mapper, &views, &grid)?;
        let q = vin_graph(&mut g, &vin, fused, &grid, ep.goal)?;
        let logits = vin_logits_graph(&mut g, &vin, q, &grid, &poses)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let lv = g.item(loss);
        if !lv.is_finite() {
            return Err(PlannerError::Diverged(format!("step {it}: loss {lv}")));
        }
        g.backward(loss)?;
        let mut grads = g.param_grads();
        grads.clip_global_norm(cfg.clip);
        opt_m.step(&mut mapper.bundle, &grads, &sched);
        opt_v.step(&mut vin.bundle, &grads, &sched);
        losses.push(lv);
        if it % 50 == 0 {
            log::info!("planner step {it}: loss {lv:.4}");
        }
    }
    Ok((mapper, vin, PlannerTrainLog { losses }))
}

/// Free poses within 4 cells of a random path pose that satisfy `keep`.
fn nearby_poses<R: Rng>(map: &GridMap, path: &[Pose], count: usize, rng: &mut R, keep: impl Fn(Pose) -> bool) -> Vec<Pose> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 8 {
        if out.len() == count {
            break;
        }
        let anchor = path[rng.gen_range(0..path.len())];
        let x = anchor.x as i64 + rng.gen_range(-4..=4);
        let y = anchor.y as i64 + rng.gen_range(-4..=4);
        let d = rng.gen_range(0..4u8);
        if !map.in_bounds(x, y) || map.is_occupied(x as usize, y as usize) {
            continue;
        }
        let p = Pose::new(x as usize, y as usize, d);
        if keep(p) {
            out.push(p);
        }
    }
    out
}

/// Which held-out episodes an evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisodes {
    pub episodes: usize,
    pub seed: u64,
    pub d_min: u32,
    pub d_max: u32,
}

impl Default for EvalEpisodes {
    fn default() -> Self {
        EvalEpisodes { episodes: 100, seed: 1, d_min: 8, d_max: 20 }
    }
}

/// Episode `i`, its oracle path and `n_views` views around it. Views are a
/// prefix of a fixed pool, so larger view counts see a superset.
fn eval_case(
    envs: &[GridMap],
    spec: &EvalEpisodes,
    i: usize,
    n_views: usize,
    ray: &RaycastConfig,
) -> Result<(Episode, PathPlan, ViewSet), PlannerError> {
    let map = &envs[i % envs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let ep = sample_episode(map, spec.d_min, spec.d_max, &mut rng)?;
    let ctg = oracle_cost_to_go(map, ep.goal)?;
    let path = oracle_plan_from(&ctg, map, ep.start)?;
    let mut views = sample_view_set(map, ViewMode::FromEnv(n_views.max(EVAL_POOL)), &mut rng, Some(&path.poses), ray)?;
    views.views.truncate(n_views);
    Ok((ep, path, views))
}

/// Fraction of episodes whose learned plan, replayed under `noise`, ends on the goal cell.
pub fn eval_open_loop(
    mapper: &MapperParams,
    vin: &VinParams,
    envs: &[GridMap],
    n_views: usize,
    spec: &EvalEpisodes,
    noise: NoiseModel,
) -> Result<f64, PlannerError> {
    let ray = RaycastConfig { rays: mapper.cfg.rays, ..RaycastConfig::default() };
    let mut successes = 0usize;
    for i in 0..spec.episodes {
        let (ep, _, views) = eval_case(envs, spec, i, n_views, &ray)?;
        let map = &envs[i % envs.len()];
        let fused = build_map(mapper, &views, Grid::full(map))?;
        let plan = vin_plan(vin, &fused, ep.goal, ep.start)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973);
        rng.set_stream(i as u64);
        let mut pose = ep.start;
        for &a in &plan.actions {
            pose = step(map, pose, a, noise, &mut rng).pose;
        }
        successes += (pose.cell() == ep.goal) as usize;
    }
    Ok(successes as f64 / spec.episodes.max(1) as f64)
}

/// Agreement of the readout head's best action with the expert along oracle paths.
pub fn eval_expert_accuracy(
    mapper: &MapperParams,
    vin: &VinParams,
    envs: &[GridMap],
    n_views: usize,
    spec: &EvalEpisodes,
) -> Result<f64, PlannerError> {
    let ray = RaycastConfig { rays: mapper.cfg.rays, ..RaycastConfig::default() };
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..spec.episodes {
        let (ep, path, views) = eval_case(envs, spec, i, n_views, &ray)?;
        let map = &envs[i % envs.len()];
        let grid = Grid::full(map);
        let ctg = oracle_cost_to_go(map, ep.goal)?;
        let mut g = Graph::new();
        let fused = map_views_graph(&mut g, mapper, &views, &grid)?;
        let q = vin_graph(&mut g, vin, fused, &grid, ep.goal)?;
        let logits = vin_logits_graph(&mut g, vin, q, &grid, &path.poses)?;
        for (row, &p) in g.data(logits).chunks(4).zip(&path.poses) {
            let best = SLOT_ACTIONS.iter().copied().fold(SLOT_ACTIONS[0], |b, a| if row[a.code()] > row[b.code()] { a } else { b });
            hits += (best == expert_action_from(&ctg, map, p)?) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
