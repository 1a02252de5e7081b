use std::collections::HashSet;
use std::sync::Arc;

use crate::autograd::{Graph, Padding, ParamBundle, Tensor, Var};
use crate::gridworld::{Action, GridMap, Pose, HEADING_DELTA};
use crate::mapper::{AlloMap, Grid, MapperParams};

use super::{CostToGo, PathPlan, PlannerError, UNREACHABLE};

/// Goal reward of the hand-set kernel. Values are kept as `BIG - cost`, so
/// zero padding outside the grid reads as "cost BIG".
pub const BIG: f64 = 1e6;
/// Goal reward and value offset of the learned planner.
pub const LEARNED_BIG: f64 = 200.0;
const LEARNED_PENALTY: f64 = 10.0;
const HEAD_SCALE: f64 = 2.0;

/// Input planes of the transition conv: 4 value planes, occupancy, goal.
pub const VI_INPUTS: usize = 6;
pub const Q_CHANNELS: usize = 16;
/// Action of each Q slot within an orientation group, in tie-break order.
pub const SLOT_ACTIONS: [Action; 4] = [Action::Forward, Action::RotateLeft, Action::RotateRight, Action::Stay];

pub fn default_k(width: usize, height: usize) -> usize {
    width + height + 8
}

fn tap(dx: i64, dy: i64) -> usize {
    ((1 - dy) * 3 + (1 + dx)) as usize
}

fn widx(out: usize, input: usize, tap: usize) -> usize {
    (out * VI_INPUTS + input) * 9 + tap
}

fn template_entries(penalty: f64, goal_reward: f64) -> Vec<(usize, f64)> {
    let mut e = Vec::new();
    for d in 0..4 {
        let (dx, dy) = HEADING_DELTA[d];
        let t = tap(dx, dy);
        e.push((widx(4 * d, d, t), 1.0));
        e.push((widx(4 * d, 4, t), -penalty));
        e.push((widx(4 * d + 1, (d + 1) % 4, 4), 1.0));
        e.push((widx(4 * d + 2, (d + 3) % 4, 4), 1.0));
        e.push((widx(4 * d + 3, 5, 4), goal_reward));
    }
    e
}

/// Which entries of the `[16, 6, 3, 3]` transition kernel exist.
pub fn transition_mask() -> Arc<[bool]> {
    let mut m = vec![false; Q_CHANNELS * VI_INPUTS * 9];
    for (i, _) in template_entries(1.0, 1.0) {
        m[i] = true;
    }
    m.into()
}

/// Hand-set transition kernel and bias: forward reads the value one cell
/// ahead minus `penalty` times its occupancy, rotations read the neighbouring
/// orientation plane, stay is rewarded only on the goal. Every move costs 1.
pub fn transition_kernel(penalty: f64, goal_reward: f64) -> (Tensor, Tensor) {
    let mut w = Tensor::zeros(&[Q_CHANNELS, VI_INPUTS, 3, 3]);
    for (i, v) in template_entries(penalty, goal_reward) {
        w.data_mut()[i] = v;
    }
    let b = (0..Q_CHANNELS).map(|o| if o % 4 == 3 { 0.0 } else { -1.0 }).collect();
    (w, Tensor::vector(b))
}

/// Runs `k` value-iteration steps and returns `(U, Q)` with `U: [4, H, W]`
/// the offset values and `Q: [16, H, W]` one more backup of the final `U`.
#[allow(clippy::too_many_arguments)]
fn vi_graph(
    g: &mut Graph,
    w: Var,
    b: Var,
    occ: Var,
    goal: Var,
    goal_reward: f64,
    k: usize,
    stop_at_fixed_point: bool,
) -> Result<(Var, Var), PlannerError> {
    let mask = transition_mask();
    let u0 = g.scale(goal, goal_reward);
    let mut u = g.concat(&[u0, u0, u0, u0])?;
    for _ in 0..k {
        let x = g.concat(&[u, occ, goal])?;
        let q = g.conv2d_masked(x, w, Some(b), 1, Padding::Same, mask.clone())?;
        let next = g.channel_max(q, 4)?;
        let done = stop_at_fixed_point && g.data(next) == g.data(u);
        u = next;
        if done {
            break;
        }
    }
    let x = g.concat(&[u, occ, goal])?;
    let q = g.conv2d_masked(x, w, Some(b), 1, Padding::Same, mask)?;
    Ok((u, q))
}

fn goal_plane(grid: &Grid, goal: (usize, usize)) -> Result<Tensor, PlannerError> {
    let (r, c) = grid.row_col(goal.0, goal.1).ok_or(PlannerError::OutsideGrid { x: goal.0, y: goal.1 })?;
    let mut t = Tensor::zeros(&[1, grid.height, grid.width]);
    t.data_mut()[r * grid.width + c] = 1.0;
    Ok(t)
}

fn occupancy_plane(map: &GridMap, grid: &Grid) -> Tensor {
    let mut t = Tensor::zeros(&[1, grid.height, grid.width]);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let (x, y) = grid.cell(r, c);
            t.data_mut()[r * grid.width + c] = map.is_occupied(x, y) as u8 as f64;
        }
    }
    t
}

fn exact_graph(map: &GridMap, goal: (usize, usize), k: usize) -> Result<(Graph, Var, Var), PlannerError> {
    if !map.in_bounds(goal.0 as i64, goal.1 as i64) {
        return Err(PlannerError::OutsideGrid { x: goal.0, y: goal.1 });
    }
    if map.is_occupied(goal.0, goal.1) {
        return Err(PlannerError::GoalOccupied { x: goal.0, y: goal.1 });
    }
    let grid = Grid::full(map);
    let (w, b) = transition_kernel(BIG, BIG);
    let mut g = Graph::new();
    let w = g.constant(w);
    let b = g.constant(b);
    let occ = g.constant(occupancy_plane(map, &grid));
    let gp = g.constant(goal_plane(&grid, goal)?);
    // Once U stops changing further backups are no-ops, so stopping early
    // gives the same values as running all k steps.
    let (u, q) = vi_graph(&mut g, w, b, occ, gp, BIG, k, true)?;
    Ok((g, u, q))
}

/// Cost-to-go recovered from `k` steps of value iteration with the hand-set
/// kernel on the true occupancy. Poses more than `k` steps away stay unreachable.
pub fn exact_vi_mode(map: &GridMap, goal: (usize, usize), k: usize) -> Result<CostToGo, PlannerError> {
    let (g, u, _) = exact_graph(map, goal, k)?;
    let (w, h) = (map.width(), map.height());
    let grid = Grid::full(map);
    let uv = g.data(u);
    let mut cost = vec![UNREACHABLE; w * h * 4];
    for y in 0..h {
        for x in 0..w {
            if map.is_occupied(x, y) {
                continue;
            }
            let (r, c) = grid.row_col(x, y).expect("cell inside full grid");
            for d in 0..4 {
                let v = uv[(d * h + r) * w + c];
                if v > BIG / 2.0 {
                    cost[(y * w + x) * 4 + d] = (BIG - v) as u32;
                }
            }
        }
    }
    Ok(CostToGo::from_raw(w, h, goal, cost))
}

/// Greedy readout of the hand-set planner on the true map.
pub fn exact_vi_plan(map: &GridMap, goal: (usize, usize), start: Pose, k: usize) -> Result<PathPlan, PlannerError> {
    let (g, _, q) = exact_graph(map, goal, k)?;
    Ok(readout(g.value(q), &Grid::full(map), goal, start, None))
}

/// Learned planner weights under the `vin.` prefix:
/// `vin.reward` maps the fused map to an occupancy belief, `vin.t` is the
/// shared transition kernel, `vin.head` maps the 4 Q values of a pose to
/// action logits in action-code order.
#[derive(Debug, Clone, PartialEq)]
pub struct VinParams {
    pub bundle: ParamBundle,
    /// Iterations; `None` uses [`default_k`] of the planning grid.
    pub k: Option<usize>,
}

impl VinParams {
    pub fn init(seed: u64, in_channels: usize) -> Self {
        let mut b = ParamBundle::new(seed);
        b.init_conv("vin.reward", in_channels, 1, 3);
        let (w, tb) = transition_kernel(LEARNED_PENALTY, LEARNED_BIG);
        b.insert("vin.t.w", w);
        b.insert("vin.t.b", tb);
        let mut head = Tensor::zeros(&[4, 4]);
        for (slot, a) in SLOT_ACTIONS.iter().enumerate() {
            head.data_mut()[a.code() * 4 + slot] = HEAD_SCALE;
        }
        b.insert("vin.head.w", head);
        b.insert("vin.head.b", Tensor::zeros(&[4]));
        VinParams { bundle: b, k: None }
    }

    /// Starts the occupancy belief at one minus the mapper's free-space probability.
    pub fn from_mapper(seed: u64, mapper: &MapperParams) -> Self {
        let mut p = VinParams::init(seed, mapper.cfg.channels + 1);
        for (src, dst) in [("head.w", "vin.reward.w"), ("head.b", "vin.reward.b")] {
            let t = mapper.bundle.get(src).expect("mapper free-space head");
            let neg = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect()).expect("same shape");
            p.bundle.insert(dst, neg);
        }
        p
    }

    pub fn iterations(&self, grid: &Grid) -> usize {
        self.k.unwrap_or_else(|| default_k(grid.width, grid.height))
    }
}

/// Q values `[16, H, W]` of the learned planner for a fused map.
pub fn vin_graph(g: &mut Graph, vp: &VinParams, fused: Var, grid: &Grid, goal: (usize, usize)) -> Result<Var, PlannerError> {
    let rw = g.param(&vp.bundle, "vin.reward.w")?;
    let rb = g.param(&vp.bundle, "vin.reward.b")?;
    let logit = g.conv2d(fused, rw, Some(rb), 1, Padding::Same)?;
    let occ = g.sigmoid(logit);
    let gp = g.constant(goal_plane(grid, goal)?);
    let w = g.param(&vp.bundle, "vin.t.w")?;
    let b = g.param(&vp.bundle, "vin.t.b")?;
    let (_, q) = vi_graph(g, w, b, occ, gp, LEARNED_BIG, vp.iterations(grid), false)?;
    Ok(q)
}

fn q_index(grid: &Grid, pose: Pose, slot: usize) -> Option<usize> {
    let (r, c) = grid.row_col(pose.x, pose.y)?;
    Some(((4 * pose.d as usize + slot) * grid.height + r) * grid.width + c)
}

/// Action logits `[n, 4]` (action-code order) at each of `poses`.
pub fn vin_logits_graph(g: &mut Graph, vp: &VinParams, q: Var, grid: &Grid, poses: &[Pose]) -> Result<Var, PlannerError> {
    let mut idx = Vec::with_capacity(poses.len() * 4);
    for &p in poses {
        for slot in 0..4 {
            idx.push(q_index(grid, p, slot).ok_or(PlannerError::OutsideGrid { x: p.x, y: p.y })?);
        }
    }
    let picked = g.gather(q, &idx)?;
    let rows = g.reshape(picked, &[poses.len(), 4])?;
    let w = g.param(&vp.bundle, "vin.head.w")?;
    let b = g.param(&vp.bundle, "vin.head.b")?;
    Ok(g.dense(rows, w, Some(b))?)
}

/// Greedy readout from the learned planner.
pub fn vin_plan(vp: &VinParams, fused: &AlloMap, goal: (usize, usize), start: Pose) -> Result<PathPlan, PlannerError> {
    let mut g = Graph::new();
    let f = g.constant(fused.data.clone());
    let q = vin_graph(&mut g, vp, f, &fused.grid, goal)?;
    let head = (vp.bundle.get("vin.head.w").expect("head weight"), vp.bundle.get("vin.head.b").expect("head bias"));
    Ok(readout(g.value(q), &fused.grid, goal, start, Some(head)))
}

/// Follows the best action from `start` under kinematic motion inside the grid.
/// Stops at the goal; a Stay elsewhere, leaving the grid, a revisited pose or
/// the `4 (W + H)` step cap truncate the plan.
fn readout(q: &Tensor, grid: &Grid, goal: (usize, usize), start: Pose, head: Option<(&Tensor, &Tensor)>) -> PathPlan {
    let cap = 4 * (grid.width + grid.height);
    let mut plan = PathPlan { actions: Vec::new(), poses: vec![start], goal, reaches_goal: false };
    let mut seen = HashSet::from([start]);
    let mut pose = start;
    for _ in 0..=cap {
        if pose.cell() == goal {
            plan.reaches_goal = true;
            return plan;
        }
        if plan.actions.len() == cap {
            break;
        }
        let Some(base) = q_index(grid, pose, 0) else { break };
        let plane = grid.width * grid.height;
        let qs: [f64; 4] = std::array::from_fn(|s| q.data()[base + s * plane]);
        let action = match head {
            None => SLOT_ACTIONS[argmax_first(&qs)],
            Some((w, b)) => {
                let logits: [f64; 4] = std::array::from_fn(|a| {
                    b.data()[a] + (0..4).map(|s| w.data()[a * 4 + s] * qs[s]).sum::<f64>()
                });
                let ordered: [f64; 4] = std::array::from_fn(|s| logits[SLOT_ACTIONS[s].code()]);
                SLOT_ACTIONS[argmax_first(&ordered)]
            }
        };
        if action == Action::Stay {
            break;
        }
        let Some(next) = action.apply_kinematic(pose).filter(|p| grid.row_col(p.x, p.y).is_some()) else { break };
        if !seen.insert(next) {
            break;
        }
        plan.actions.push(action);
        plan.poses.push(next);
        pose = next;
    }
    plan
}

fn argmax_first(v: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
