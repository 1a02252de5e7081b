use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::grad_check_params;
use crate::gridworld::{generate_map, sample_view_set, MapStyle, ViewMode};

fn params() -> SynthParams {
    SynthParams::init(5, SynthConfig::default())
}

fn views(n: usize, seed: u64) -> (GridMap, ViewSet) {
    let m = generate_map(seed, 16, 16, MapStyle::Rooms).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vs = sample_view_set(&m, ViewMode::FromEnv(n), &mut rng, None, &RaycastConfig::default()).unwrap();
    (m, vs)
}

#[test]
fn relative_pose_examples() {
    let p = Pose::new(4, 4, 2);
    assert_eq!(relative_pose(p, p), RelativePose { dx: 0, dy: 0, dh: 0 });
    for d in 0..4u8 {
        let rho = Pose::new(5, 5, d);
        let (ax, ay) = rho.ahead().unwrap();
        assert_eq!(relative_pose(Pose::new(ax, ay, d), rho), RelativePose { dx: 0, dy: 1, dh: 0 });
    }
    // One cell to the east of a north-facing target is one to its right.
    assert_eq!(relative_pose(Pose::new(6, 5, 0), Pose::new(5, 5, 1)), RelativePose { dx: 1, dy: 0, dh: 3 });
}

#[test]
fn relative_pose_is_inverse_consistent_on_6x6() {
    let all: Vec<Pose> = (0..6).flat_map(|x| (0..6).flat_map(move |y| (0..4).map(move |d| Pose::new(x, y, d)))).collect();
    for &a in &all {
        for &b in &all {
            let r = relative_pose(a, b);
            assert_eq!(r.world_offset(b.d), (a.x as i64 - b.x as i64, a.y as i64 - b.y as i64));
            assert_eq!((b.d + r.dh) % 4, a.d);
        }
    }
}

#[test]
fn synthesis_is_permutation_invariant() {
    let p = params();
    let (m, vs) = views(8, 1);
    let target = Pose::new(m.free_cells()[4].0, m.free_cells()[4].1, 1);
    let base = synthesize(&p, &vs, target).unwrap();
    let mut rev = vs.clone();
    rev.views.reverse();
    assert_eq!(synthesize(&p, &rev, target).unwrap(), base);
    let mut rot = vs.clone();
    rot.views.rotate_left(3);
    assert_eq!(synthesize(&p, &rot, target).unwrap(), base);
}

#[test]
fn single_view_gives_its_contribution() {
    let p = params();
    let (_, vs) = views(1, 2);
    let target = Pose::new(3, 3, 0);
    let f = synthesize(&p, &vs, target).unwrap();
    // The contribution computed directly through the fusion net.
    let mut g = Graph::new();
    let (enc, poses) = encode_views_graph(&mut g, &p.bundle, &vs).unwrap();
    let a = dense_layer(&mut g, &p.bundle, "synth.omega.e", enc).unwrap();
    let rel = g.constant(Tensor::new(vec![1, REL_DIM], relative_pose(poses[0], target).encode().to_vec()).unwrap());
    let rw = g.param(&p.bundle, "synth.omega.r.w").unwrap();
    let r = g.dense(rel, rw, None).unwrap();
    let h = g.add(a, r).unwrap();
    let h = g.relu(h);
    let h = dense_layer(&mut g, &p.bundle, "synth.omega.h2", h).unwrap();
    let h = g.relu(h);
    let c = dense_layer(&mut g, &p.bundle, "synth.omega.c", h).unwrap();
    assert_eq!(g.data(c), f.as_slice());
    assert_eq!(f.len(), 32);
}

#[test]
fn duplicated_view_matches_single() {
    let p = params();
    let (_, vs) = views(1, 3);
    let mut twice = vs.clone();
    twice.views.push(vs.views[0].clone());
    let t = Pose::new(7, 2, 3);
    assert_eq!(synthesize(&p, &twice, t).unwrap(), synthesize(&p, &vs, t).unwrap());
}

#[test]
fn weights_are_normalized() {
    let p = params();
    let (_, vs) = views(12, 4);
    let w = synthesis_weights(&p, &vs, Pose::new(5, 5, 2)).unwrap();
    assert_eq!(w.len(), 12);
    assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn empty_view_set_is_an_error() {
    assert_eq!(synthesize(&params(), &ViewSet::default(), Pose::new(1, 1, 0)), Err(SynthError::NoViews));
}

#[test]
fn actual_feature_and_pair_score() {
    let p = params();
    let (m, vs) = views(5, 6);
    let (x, y) = m.free_cells()[2];
    let pose = Pose::new(x, y, 0);
    let f = actual_feature(&p, &m, pose).unwrap();
    assert_eq!(f.len(), 32);
    assert_eq!(actual_feature(&p, &m, pose).unwrap(), f);
    let fhat = synthesize(&p, &vs, pose).unwrap();
    let s = pair_score(&p, &fhat, &f).unwrap();
    assert!(s > 0.0 && s < 1.0);
    assert_eq!(pair_score(&p, &fhat, &f).unwrap(), s);
}

#[test]
fn pair_loss_gradient_wrt_fusion_net() {
    let p = params();
    let (m, vs) = views(4, 7);
    let free = m.free_cells();
    let targets = [Pose::new(free[1].0, free[1].1, 0), Pose::new(free[9].0, free[9].1, 2)];
    let ray = RaycastConfig::default();
    let probes: Vec<Observation> = targets.iter().map(|&t| raycast_observe(&m, t, &ray)).collect();
    let r = grad_check_params(
        |g, b| {
            let (enc, poses) = encode_views_graph(g, b, &vs).map_err(|e| match e {
                SynthError::Autograd(a) => a,
                other => panic!("{other}"),
            })?;
            let (fhat, _) = synth_graph(g, b, enc, &poses, &targets).map_err(|e| match e {
                SynthError::Autograd(a) => a,
                other => panic!("{other}"),
            })?;
            let refs: Vec<&Observation> = probes.iter().collect();
            let x = g.constant(obs_tensor(&refs)?);
            let f = encode_graph(g, b, x)?;
            let l = pair_graph(g, b, fhat, f)?;
            g.bce_with_logits(l, &[1.0, 0.0])
        },
        &p.bundle,
        &["synth.omega.e.w", "synth.omega.r.w", "synth.omega.h2.w", "synth.omega.c.w", "synth.omega.l.w", "synth.omega.l.b"],
        1e-5,
        Some(8),
        11,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn negative_rule() {
    let a = Pose::new(5, 5, 0);
    assert!(!is_negative_pair(a, a));
    assert!(is_negative_pair(a, Pose::new(5, 5, 1)));
    assert!(!is_negative_pair(a, Pose::new(7, 6, 0)));
    assert!(is_negative_pair(a, Pose::new(8, 5, 0)));
}

#[test]
fn short_training_is_reproducible_and_writes_grid() {
    let envs: Vec<GridMap> = (0..2).map(|s| generate_map(40 + s, 12, 12, MapStyle::Rooms).unwrap()).collect();
    let cfg = SynthTrainConfig { iters: 5, batch: 8, refs: vec![4], ..SynthTrainConfig::default() };
    let (p1, l1) = train_synth(&envs, &cfg).unwrap();
    let (p2, l2) = train_synth(&envs, &cfg).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
    let e = eval_localization_ap(&p1, &envs, 5, 20, 3).unwrap();
    assert_eq!(e.pairs, 40);
    assert_eq!(e.positive_rate, 0.5);
    let (_, vs) = views(5, 9);
    let m = generate_map(9, 16, 16, MapStyle::Rooms).unwrap();
    let cells = score_grid(&p1, &m, &vs).unwrap();
    assert_eq!(cells.len(), m.free_cells().len() * 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.csv");
    write_score_grid_csv(&path, &cells).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,heading,score"));
    assert_eq!(text.lines().count(), cells.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthesis_invariant_under_random_permutation(seed in 0u64..1000, n in 2usize..9) {
        let p = params();
        let (m, vs) = views(n, seed % 50);
        let free = m.free_cells();
        let t = Pose::new(free[seed as usize % free.len()].0, free[seed as usize % free.len()].1, (seed % 4) as u8);
        let base = synthesize(&p, &vs, t).unwrap();
        let mut shuffled = vs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.views.as_mut_slice(), &mut rng);
        prop_assert_eq!(synthesize(&p, &shuffled, t).unwrap(), base);
    }
}
