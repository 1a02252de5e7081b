//! Pose-lattice planning: the exact shortest-path oracle and expert labels,
//! value iteration in convolutional form (exact and learned), and plan readout.

pub mod oracle;
mod train;
mod vin;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, GridMap, Pose};

pub use oracle::{
    distances_from, expert_action, expert_action_from, oracle_cost_to_go, oracle_plan, oracle_plan_from, successor, CostToGo,
    EXPERT_PREFERENCE, UNREACHABLE,
};
pub use train::{eval_expert_accuracy, eval_open_loop, train_mapper_planner, EvalEpisodes, PlannerTrainConfig, PlannerTrainLog};
pub use vin::{
    default_k, exact_vi_mode, exact_vi_plan, transition_kernel, transition_mask, vin_graph, vin_logits_graph, vin_plan, VinParams, BIG,
    LEARNED_BIG, Q_CHANNELS, SLOT_ACTIONS, VI_INPUTS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("goal cell ({x},{y}) is occupied")]
    GoalOccupied { x: usize, y: usize },
    #[error("goal is unreachable from pose ({},{},{})", pose.x, pose.y, pose.d)]
    Unreachable { pose: Pose },
    #[error("cell ({x},{y}) is outside the planning grid")]
    OutsideGrid { x: usize, y: usize },
    #[error(transparent)]
    Mapper(#[from] crate::mapper::MapperError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
}

/// Planned actions `a_1..a_J` with the poses `ρ_0..ρ_J` they pass through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPlan {
    pub actions: Vec<Action>,
    pub poses: Vec<Pose>,
    pub goal: (usize, usize),
    pub reaches_goal: bool,
}

#[derive(Serialize, Deserialize)]
struct PlanWire {
    actions: Vec<Action>,
    poses: Vec<Pose>,
}

impl PathPlan {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn start(&self) -> Pose {
        self.poses[0]
    }

    pub fn end(&self) -> Pose {
        *self.poses.last().expect("plan has a start pose")
    }

    /// True when replaying the actions noiselessly from `ρ_0` reproduces `ρ_1..ρ_J`.
    pub fn is_consistent(&self, map: &GridMap) -> bool {
        if self.poses.len() != self.actions.len() + 1 {
            return false;
        }
        self.actions.iter().enumerate().all(|(j, &a)| successor(map, self.poses[j], a) == self.poses[j + 1])
    }

    /// `{"actions": [ints], "poses": [[x,y,d], ...]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&PlanWire { actions: self.actions.clone(), poses: self.poses.clone() }).expect("plan serializes")
    }

    pub fn from_json(text: &str, goal: (usize, usize)) -> Result<PathPlan, serde_json::Error> {
        let w: PlanWire = serde_json::from_str(text)?;
        let reaches_goal = w.poses.last().is_some_and(|p| (p.x, p.y) == goal);
        Ok(PathPlan { actions: w.actions, poses: w.poses, goal, reaches_goal })
    }
}

#[cfg(test)]
mod tests;
