use petgraph::algo::dijkstra;
use petgraph::graph::{DiGraph, NodeIndex};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gridworld::{generate_map, GridMap, MapStyle};

/// Second implementation: Dijkstra on an explicit reversed pose graph with a
/// virtual source joined to the four goal poses.
fn dijkstra_costs(map: &GridMap, goal: (usize, usize)) -> Vec<u32> {
    let (w, h) = (map.width(), map.height());
    let mut g: DiGraph<(), u32> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..w * h * 4).map(|_| g.add_node(())).collect();
    let id = |x: usize, y: usize, d: usize| nodes[(y * w + x) * 4 + d];
    let deltas = [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)];
    for y in 0..h {
        for x in 0..w {
            if map.is_occupied(x, y) {
                continue;
            }
            for d in 0..4 {
                g.add_edge(id(x, y, (d + 1) % 4), id(x, y, d), 1);
                g.add_edge(id(x, y, (d + 3) % 4), id(x, y, d), 1);
                let (nx, ny) = (x as i64 + deltas[d].0, y as i64 + deltas[d].1);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && !map.is_occupied(nx as usize, ny as usize) {
                    g.add_edge(id(nx as usize, ny as usize, d), id(x, y, d), 1);
                }
            }
        }
    }
    let src = g.add_node(());
    for d in 0..4 {
        g.add_edge(src, id(goal.0, goal.1, d), 0);
    }
    let dist = dijkstra(&g, src, None, |e| *e.weight());
    nodes.iter().map(|n| dist.get(n).copied().unwrap_or(UNREACHABLE)).collect()
}

fn random_case(seed: u64, max: usize) -> (GridMap, (usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.gen_range(8..=max);
    let h = rng.gen_range(8..=max);
    let style = [MapStyle::Rooms, MapStyle::Maze, MapStyle::Open][rng.gen_range(0..3)];
    let m = generate_map(seed, w, h, style).unwrap();
    let free = m.free_cells();
    let goal = free[rng.gen_range(0..free.len())];
    (m, goal)
}

#[test]
fn oracle_matches_dijkstra_on_random_maps() {
    for seed in 0..40 {
        let (m, goal) = random_case(seed, 12);
        let ctg = oracle_cost_to_go(&m, goal).unwrap();
        assert_eq!(ctg.raw(), dijkstra_costs(&m, goal).as_slice(), "seed {seed}");
    }
}

#[test]
fn exact_vi_on_empty_map_equals_oracle() {
    // The border ring is always wall, leaving a 6x6 free interior.
    let m = GridMap::from_occupancy(8, 8, vec![false; 64], 0).unwrap();
    let ctg = oracle_cost_to_go(&m, (3, 5)).unwrap();
    let vi = exact_vi_mode(&m, (3, 5), default_k(8, 8)).unwrap();
    assert_eq!(vi.raw().len(), 256);
    assert_eq!(vi, ctg);
    assert_eq!(vi.raw().iter().filter(|&&c| c != UNREACHABLE).count(), 36 * 4);
}

#[test]
fn exact_vi_on_maze_equals_oracle() {
    let m = generate_map(11, 15, 15, MapStyle::Maze).unwrap();
    let goal = m.free_cells()[0];
    let ctg = oracle_cost_to_go(&m, goal).unwrap();
    let vi = exact_vi_mode(&m, goal, ctg.max_finite() as usize).unwrap();
    assert_eq!(vi, ctg);
}

#[test]
fn exact_vi_equals_oracle_on_random_maps() {
    for seed in 0..100 {
        let (m, goal) = random_case(1000 + seed, 16);
        let ctg = oracle_cost_to_go(&m, goal).unwrap();
        let k = default_k(m.width(), m.height()).max(ctg.max_finite() as usize);
        assert_eq!(exact_vi_mode(&m, goal, k).unwrap(), ctg, "seed {seed}");
    }
}

#[test]
fn zero_iterations_leave_only_goal_finite() {
    let (m, goal) = random_case(3, 12);
    let vi = exact_vi_mode(&m, goal, 0).unwrap();
    for (i, &c) in vi.raw().iter().enumerate() {
        let cell = (i / 4) % m.width() == goal.0 && (i / 4) / m.width() == goal.1;
        assert_eq!(c != UNREACHABLE, cell);
        if cell {
            assert_eq!(c, 0);
        }
    }
}

#[test]
fn too_few_iterations_under_converge() {
    let m = GridMap::from_occupancy(10, 10, vec![false; 100], 0).unwrap();
    let ctg = oracle_cost_to_go(&m, (1, 1)).unwrap();
    let vi = exact_vi_mode(&m, (1, 1), 5).unwrap();
    for (a, b) in ctg.raw().iter().zip(vi.raw()) {
        if *a <= 5 {
            assert_eq!(a, b);
        } else {
            assert_eq!(*b, UNREACHABLE);
        }
    }
}

#[test]
fn exact_plans_match_oracle_plans() {
    for seed in 0..20 {
        let (m, goal) = random_case(500 + seed, 14);
        let ctg = oracle_cost_to_go(&m, goal).unwrap();
        let free = m.free_cells();
        let (x, y) = free[(seed as usize * 7) % free.len()];
        let start = Pose::new(x, y, (seed % 4) as u8);
        if ctg.finite(start).is_none() {
            continue;
        }
        let k = ctg.max_finite() as usize;
        let plan = exact_vi_plan(&m, goal, start, k).unwrap();
        assert_eq!(plan, oracle_plan_from(&ctg, &m, start).unwrap());
        assert!(plan.is_consistent(&m));
    }
}

#[test]
fn expert_rollout_takes_exactly_the_cost() {
    let m = generate_map(21, 16, 16, MapStyle::Rooms).unwrap();
    let goal = m.free_cells()[10];
    let ctg = oracle_cost_to_go(&m, goal).unwrap();
    for (x, y) in m.free_cells().into_iter().step_by(5) {
        for d in 0..4 {
            let mut p = Pose::new(x, y, d);
            let Some(cost) = ctg.finite(p) else { continue };
            let mut steps = 0;
            while p.cell() != goal {
                p = successor(&m, p, expert_action_from(&ctg, &m, p).unwrap());
                steps += 1;
            }
            assert_eq!(steps, cost);
        }
    }
}

#[test]
fn plan_json_round_trip() {
    let m = generate_map(2, 12, 12, MapStyle::Rooms).unwrap();
    let free = m.free_cells();
    let plan = oracle_plan(&m, Pose::new(free[0].0, free[0].1, 0), free[free.len() - 1]).unwrap();
    let back = PathPlan::from_json(&plan.to_json(), plan.goal).unwrap();
    assert_eq!(back, plan);
}

#[test]
fn learned_plan_is_consistent_and_bounded() {
    let m = generate_map(5, 16, 16, MapStyle::Rooms).unwrap();
    let mapper = crate::mapper::MapperParams::init(1, crate::mapper::MapperConfig::default());
    let vin = VinParams::from_mapper(1, &mapper);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let views = crate::gridworld::sample_view_set(
        &m,
        crate::gridworld::ViewMode::FromEnv(10),
        &mut rng,
        None,
        &crate::gridworld::RaycastConfig::default(),
    )
    .unwrap();
    let fused = crate::mapper::build_map(&mapper, &views, crate::mapper::Grid::full(&m)).unwrap();
    let free = m.free_cells();
    for i in 0..5 {
        let start = Pose::new(free[i * 3].0, free[i * 3].1, i as u8 % 4);
        let plan = vin_plan(&vin, &fused, free[free.len() - 1 - i], start).unwrap();
        assert!(plan.len() <= 4 * 32);
        assert_eq!(plan.poses.len(), plan.actions.len() + 1);
        for (w, a) in plan.poses.windows(2).zip(&plan.actions) {
            assert_eq!(a.apply_kinematic(w[0]), Some(w[1]));
        }
        assert_eq!(plan.reaches_goal, plan.end().cell() == plan.goal);
    }
}

#[test]
fn learned_planner_gradient_check() {
    let m = generate_map(8, 8, 8, MapStyle::Rooms).unwrap();
    let grid = crate::mapper::Grid::full(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fused = crate::autograd::Tensor::new(vec![9, 8, 8], (0..576).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let mut vin = VinParams::init(3, 9);
    vin.k = Some(3);
    // Jitter the structural entries so channel maxima are not tied.
    let mask = transition_mask();
    let w = vin.bundle.get_mut("vin.t.w").unwrap();
    for (v, &on) in w.data_mut().iter_mut().zip(mask.iter()) {
        if on {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    for v in vin.bundle.get_mut("vin.t.b").unwrap().data_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let goal = m.free_cells()[0];
    let poses: Vec<Pose> = m.free_cells().iter().take(6).map(|&(x, y)| Pose::new(x, y, 1)).collect();
    let labels = [0, 1, 2, 3, 3, 1];
    let r = crate::autograd::grad_check_params(
        |g, b| {
            let v = VinParams { bundle: b.clone(), k: Some(3) };
            let f = g.constant(fused.clone());
            let q = vin_graph(g, &v, f, &grid, goal).map_err(|e| match e {
                PlannerError::Autograd(a) => a,
                other => panic!("{other}"),
            })?;
            let l = vin_logits_graph(g, &v, q, &grid, &poses).map_err(|e| match e {
                PlannerError::Autograd(a) => a,
                other => panic!("{other}"),
            })?;
            g.cross_entropy(l, &labels)
        },
        &vin.bundle,
        &["vin.reward.w", "vin.t.w", "vin.t.b", "vin.head.w", "vin.head.b"],
        1e-5,
        Some(8),
        2,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn short_joint_training_is_reproducible() {
    let envs: Vec<GridMap> = (0..2).map(|s| generate_map(300 + s, 16, 16, MapStyle::Rooms).unwrap()).collect();
    let mapper = crate::mapper::MapperParams::init(0, crate::mapper::MapperConfig::default());
    let cfg = PlannerTrainConfig { iters: 4, views: vec![4], max_goal_distance: 10, ..PlannerTrainConfig::default() };
    let (_, v1, l1) = train_mapper_planner(&envs, &cfg, Some(&mapper)).unwrap();
    let (_, v2, l2) = train_mapper_planner(&envs, &cfg, Some(&mapper)).unwrap();
    assert_eq!(l1.losses, l2.losses);
    assert_eq!(v1, v2);
    assert!(l1.losses.iter().all(|l| l.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjacent_poses_differ_by_at_most_one(seed in 0u64..10_000) {
        let (m, goal) = random_case(seed, 14);
        let ctg = oracle_cost_to_go(&m, goal).unwrap();
        for (x, y) in m.free_cells() {
            for d in 0..4 {
                let p = Pose::new(x, y, d);
                let Some(c) = ctg.finite(p) else { continue };
                for a in [Action::Forward, Action::RotateLeft, Action::RotateRight] {
                    let n = successor(&m, p, a);
                    // Action edges are directed: the successor is at most one cheaper.
                    prop_assert!(ctg.get(n) + 1 >= c);
                    if a != Action::Forward {
                        prop_assert!(ctg.get(n) <= c + 1);
                    }
                }
            }
        }
    }
}
