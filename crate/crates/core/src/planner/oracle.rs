use std::collections::VecDeque;

use crate::gridworld::{Action, GridMap, Pose};

use super::{PathPlan, PlannerError};

pub const UNREACHABLE: u32 = u32::MAX;

/// Minimal number of actions from every pose to a goal location, with the
/// goal reached at any heading. Occupied or unreachable poses hold [`UNREACHABLE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostToGo {
    width: usize,
    height: usize,
    goal: (usize, usize),
    cost: Vec<u32>,
}

impl CostToGo {
    pub fn from_raw(width: usize, height: usize, goal: (usize, usize), cost: Vec<u32>) -> Self {
        assert_eq!(cost.len(), width * height * 4);
        CostToGo { width, height, goal, cost }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    fn slot(&self, x: usize, y: usize, d: u8) -> usize {
        (y * self.width + x) * 4 + d as usize
    }

    pub fn get(&self, pose: Pose) -> u32 {
        if pose.x >= self.width || pose.y >= self.height {
            return UNREACHABLE;
        }
        self.cost[self.slot(pose.x, pose.y, pose.d)]
    }

    pub fn finite(&self, pose: Pose) -> Option<u32> {
        Some(self.get(pose)).filter(|&c| c != UNREACHABLE)
    }

    /// Distance to the goal location ignoring heading at the current cell.
    pub fn cell_distance(&self, x: usize, y: usize) -> u32 {
        (0..4).map(|d| self.get(Pose::new(x, y, d))).min().unwrap_or(UNREACHABLE)
    }

    pub fn raw(&self) -> &[u32] {
        &self.cost
    }

    pub fn max_finite(&self) -> u32 {
        self.cost.iter().copied().filter(|&c| c != UNREACHABLE).max().unwrap_or(0)
    }
}

/// Breadth-first search over the pose lattice, backwards from all four goal-headed poses.
/// Rotations and forward moves into free cells each cost one action.
pub fn oracle_cost_to_go(map: &GridMap, goal: (usize, usize)) -> Result<CostToGo, PlannerError> {
    let (gx, gy) = goal;
    if map.is_occupied(gx, gy) {
        return Err(PlannerError::GoalOccupied { x: gx, y: gy });
    }
    let (w, h) = (map.width(), map.height());
    let mut cost = vec![UNREACHABLE; w * h * 4];
    let mut queue = VecDeque::new();
    for d in 0..4u8 {
        cost[(gy * w + gx) * 4 + d as usize] = 0;
        queue.push_back(Pose::new(gx, gy, d));
    }
    while let Some(p) = queue.pop_front() {
        let c = cost[(p.y * w + p.x) * 4 + p.d as usize];
        for pred in predecessors(map, p) {
            let slot = (pred.y * w + pred.x) * 4 + pred.d as usize;
            if cost[slot] == UNREACHABLE {
                cost[slot] = c + 1;
                queue.push_back(pred);
            }
        }
    }
    Ok(CostToGo { width: w, height: h, goal, cost })
}

/// Poses from which one action reaches `p`.
fn predecessors(map: &GridMap, p: Pose) -> impl Iterator<Item = Pose> {
    // Rotating left from d-1 or right from d+1 lands on d.
    let mut preds = [None; 3];
    preds[0] = Some(p.rotate_right());
    preds[1] = Some(p.rotate_left());
    let (dx, dy) = crate::gridworld::HEADING_DELTA[p.d as usize];
    let (bx, by) = (p.x as i64 - dx, p.y as i64 - dy);
    if map.in_bounds(bx, by) && map.is_free(bx as usize, by as usize) {
        preds[2] = Some(Pose::new(bx as usize, by as usize, p.d));
    }
    preds.into_iter().flatten()
}

/// Noiseless successor of `action`, staying put when blocked.
pub fn successor(map: &GridMap, pose: Pose, action: Action) -> Pose {
    match action {
        Action::Forward => match pose.ahead() {
            Some((x, y)) if map.is_free(x, y) => Pose::new(x, y, pose.d),
            _ => pose,
        },
        other => other.apply_kinematic(pose).unwrap_or(pose),
    }
}

/// Forward search: action distance from `start` to every pose.
pub fn distances_from(map: &GridMap, start: Pose) -> Vec<u32> {
    let (w, h) = (map.width(), map.height());
    let mut dist = vec![UNREACHABLE; w * h * 4];
    if !map.pose_is_free(&start) {
        return dist;
    }
    dist[(start.y * w + start.x) * 4 + start.d as usize] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        let c = dist[(p.y * w + p.x) * 4 + p.d as usize];
        for a in [Action::Forward, Action::RotateLeft, Action::RotateRight] {
            let n = successor(map, p, a);
            let slot = (n.y * w + n.x) * 4 + n.d as usize;
            if dist[slot] == UNREACHABLE {
                dist[slot] = c + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Tie-break order for equally good actions.
pub const EXPERT_PREFERENCE: [Action; 4] = [Action::Forward, Action::RotateLeft, Action::RotateRight, Action::Stay];

/// Optimal action from `pose` under a precomputed cost-to-go.
pub fn expert_action_from(ctg: &CostToGo, map: &GridMap, pose: Pose) -> Result<Action, PlannerError> {
    let here = ctg.finite(pose).ok_or(PlannerError::Unreachable { pose })?;
    if here == 0 {
        return Ok(Action::Stay);
    }
    let best = EXPERT_PREFERENCE
        .iter()
        .copied()
        .min_by_key(|&a| ctg.get(successor(map, pose, a)))
        .expect("four candidates");
    Ok(best)
}

pub fn expert_action(map: &GridMap, pose: Pose, goal: (usize, usize)) -> Result<Action, PlannerError> {
    let ctg = oracle_cost_to_go(map, goal)?;
    expert_action_from(&ctg, map, pose)
}

/// Optimal plan obtained by following the expert from `start`.
pub fn oracle_plan(map: &GridMap, start: Pose, goal: (usize, usize)) -> Result<PathPlan, PlannerError> {
    let ctg = oracle_cost_to_go(map, goal)?;
    oracle_plan_from(&ctg, map, start)
}

pub fn oracle_plan_from(ctg: &CostToGo, map: &GridMap, start: Pose) -> Result<PathPlan, PlannerError> {
    let mut poses = vec![start];
    let mut actions = Vec::new();
    let mut pose = start;
    while ctg.get(pose) != 0 {
        let a = expert_action_from(ctg, map, pose)?;
        pose = successor(map, pose, a);
        actions.push(a);
        poses.push(pose);
    }
    Ok(PathPlan { actions, poses, goal: ctg.goal(), reaches_goal: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_map, MapStyle};

    #[test]
    fn goal_poses_cost_zero() {
        let m = generate_map(1, 10, 10, MapStyle::Rooms).unwrap();
        let (gx, gy) = m.free_cells()[5];
        let ctg = oracle_cost_to_go(&m, (gx, gy)).unwrap();
        for d in 0..4 {
            assert_eq!(ctg.get(Pose::new(gx, gy, d)), 0);
        }
    }

    #[test]
    fn straight_line_cost() {
        // Lattice coordinates shifted by one because of the border wall.
        let m = generate_map(1, 10, 10, MapStyle::Open).unwrap();
        let ctg = oracle_cost_to_go(&m, (5, 1)).unwrap();
        assert_eq!(ctg.get(Pose::new(1, 1, 0)), 4);
        assert_eq!(ctg.get(Pose::new(1, 1, 2)), 6);
        assert_eq!(ctg.get(Pose::new(1, 1, 1)), 5);
    }

    #[test]
    fn occupied_goal_is_an_error() {
        let m = generate_map(1, 10, 10, MapStyle::Open).unwrap();
        assert_eq!(oracle_cost_to_go(&m, (0, 0)), Err(PlannerError::GoalOccupied { x: 0, y: 0 }));
    }

    #[test]
    fn bellman_residual_is_zero() {
        for seed in 0..10 {
            let m = generate_map(seed, 14, 12, MapStyle::Maze).unwrap();
            let goal = m.free_cells()[seed as usize % m.free_cells().len()];
            let ctg = oracle_cost_to_go(&m, goal).unwrap();
            for (x, y) in m.free_cells() {
                for d in 0..4 {
                    let p = Pose::new(x, y, d);
                    let c = ctg.get(p);
                    if c == 0 || c == UNREACHABLE {
                        continue;
                    }
                    let best = [Action::Forward, Action::RotateLeft, Action::RotateRight]
                        .iter()
                        .map(|&a| ctg.get(successor(&m, p, a)))
                        .min()
                        .unwrap();
                    assert_eq!(c, best + 1);
                }
            }
        }
    }

    #[test]
    fn expert_examples() {
        let m = generate_map(1, 10, 10, MapStyle::Open).unwrap();
        assert_eq!(expert_action(&m, Pose::new(5, 5, 0), (5, 5)).unwrap(), Action::Stay);
        assert_eq!(expert_action(&m, Pose::new(2, 5, 0), (6, 5)).unwrap(), Action::Forward);
        assert_eq!(expert_action(&m, Pose::new(2, 5, 1), (6, 5)).unwrap(), Action::RotateRight);
    }

    #[test]
    fn forward_distances_agree_with_backward_costs() {
        let m = generate_map(4, 12, 12, MapStyle::Rooms).unwrap();
        let free = m.free_cells();
        let start = Pose::new(free[0].0, free[0].1, 1);
        let dist = distances_from(&m, start);
        for &(gx, gy) in free.iter().step_by(7) {
            let ctg = oracle_cost_to_go(&m, (gx, gy)).unwrap();
            let via_forward = (0..4).map(|d| dist[(gy * 12 + gx) * 4 + d]).min().unwrap();
            assert_eq!(via_forward, ctg.get(start));
        }
    }
}
