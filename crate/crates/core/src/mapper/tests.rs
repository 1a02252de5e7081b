use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::grad_check_params;
use crate::gridworld::{generate_map, raycast_observe, sample_view_set, MapStyle, RaycastConfig, ViewMode};

fn params() -> MapperParams {
    MapperParams::init(7, MapperConfig::default())
}

fn random_ego(seed: u64) -> EgoMap {
    let m = generate_map(seed, 16, 16, MapStyle::Rooms).unwrap();
    let (x, y) = m.free_cells()[3];
    let obs = raycast_observe(&m, Pose::new(x, y, 1), &RaycastConfig::default());
    encode_ego(&params(), &obs).unwrap()
}

#[test]
fn ego_shape_and_confidence_range() {
    let e = random_ego(1);
    assert_eq!(e.data.shape(), &[9, 16, 16]);
    let conf = &e.data.data()[8 * 256..];
    assert!(conf.iter().all(|&c| c > 0.0 && c < 1.0));
    assert_eq!(random_ego(1), e);
}

#[test]
fn north_facing_warp_copies_unrotated() {
    let e = random_ego(2);
    let grid = Grid { x0: 0, y0: 0, width: 32, height: 32 };
    let pose = Pose::new(16, 16, 1);
    let a = warp_to_allo(&e, pose, grid).unwrap();
    let (ar, ac) = grid.row_col(16, 16).unwrap();
    for ch in 0..9 {
        for er in 0..16 {
            for ec in 0..16 {
                let (r, c) = (ar + er - 15, ac + ec - 8);
                assert_eq!(a.data.data()[(ch * 32 + r) * 32 + c], e.data.data()[(ch * 16 + er) * 16 + ec]);
            }
        }
    }
}

#[test]
fn ego_row_forward_col_right_convention() {
    // A marker one cell ahead and two to the right of an east-facing agent
    // must land at world offset (+1, -2).
    let mut t = Tensor::zeros(&[1, 16, 16]);
    t.data_mut()[(16 - 1 - 1) * 16 + 8 + 2] = 1.0;
    let grid = Grid { x0: 0, y0: 0, width: 20, height: 20 };
    let a = warp_to_allo(&EgoMap { data: t }, Pose::new(10, 10, 0), grid).unwrap();
    let (r, c) = grid.row_col(11, 8).unwrap();
    assert_eq!(a.data.data()[r * 20 + c], 1.0);
    assert_eq!(a.data.data().iter().sum::<f64>(), 1.0);
}

#[test]
fn warp_is_equivariant_under_quarter_turns() {
    let e = random_ego(3);
    let grid = Grid { x0: 0, y0: 0, width: 40, height: 40 };
    let (px, py) = (20i64, 19i64);
    for d in 0..4u8 {
        let a = warp_to_allo(&e, Pose::new(px as usize, py as usize, d), grid).unwrap();
        let b = warp_to_allo(&e, Pose::new(px as usize, py as usize, (d + 1) % 4), grid).unwrap();
        for dy in -19i64..=19 {
            for dx in -19i64..=19 {
                let (x, y) = (px + dx, py + dy);
                let (xr, yr) = (px - dy, py + dx);
                let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < 40 && y < 40;
                if !inside(x, y) || !inside(xr, yr) {
                    continue;
                }
                let (r, c) = grid.row_col(x as usize, y as usize).unwrap();
                let (rr, cr) = grid.row_col(xr as usize, yr as usize).unwrap();
                for ch in 0..9 {
                    assert_eq!(a.data.data()[(ch * 40 + r) * 40 + c].to_bits(), b.data.data()[(ch * 40 + rr) * 40 + cr].to_bits());
                }
            }
        }
    }
}

#[test]
fn confidence_mass_is_preserved_inside_grid() {
    let e = random_ego(4);
    let ego_mass: f64 = e.data.data()[8 * 256..].iter().sum();
    let grid = Grid { x0: 0, y0: 0, width: 36, height: 36 };
    for d in 0..4 {
        for (x, y) in [(17, 17), (18, 16), (16, 19)] {
            let a = warp_to_allo(&e, Pose::new(x, y, d), grid).unwrap();
            let mass: f64 = a.confidence().iter().sum();
            assert!((mass - ego_mass).abs() < 1e-9, "{mass} vs {ego_mass}");
            assert_eq!(a.confidence().iter().filter(|&&c| c > 0.0).count(), 256);
        }
    }
}

#[test]
fn footprint_outside_grid_is_all_zero() {
    let e = random_ego(5);
    let grid = Grid { x0: 0, y0: 0, width: 10, height: 10 };
    let a = warp_to_allo(&e, Pose::new(40, 40, 0), grid).unwrap();
    assert!(a.data.data().iter().all(|&v| v == 0.0));
}

fn allo_set(n: usize) -> Vec<AlloMap> {
    let m = generate_map(6, 20, 20, MapStyle::Rooms).unwrap();
    let p = params();
    let grid = Grid::full(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vs = sample_view_set(&m, ViewMode::FromEnv(n), &mut rng, None, &RaycastConfig::default()).unwrap();
    vs.views.iter().map(|v| warp_to_allo(&encode_ego(&p, &v.obs).unwrap(), v.pose, grid).unwrap()).collect()
}

#[test]
fn fusion_is_permutation_invariant() {
    let p = params();
    let maps = allo_set(6);
    let base = fuse_maps(&p, &maps).unwrap();
    let mut rev = maps.clone();
    rev.reverse();
    assert_eq!(fuse_maps(&p, &rev).unwrap(), base);
    let mut rot = maps.clone();
    rot.rotate_left(2);
    assert_eq!(fuse_maps(&p, &rot).unwrap(), base);
}

#[test]
fn single_map_fusion_is_refinement_of_input() {
    let p = params();
    let a = &allo_set(1)[0];
    let fused = fuse_maps(&p, std::slice::from_ref(a)).unwrap();
    // Refinement applied directly to the input.
    let mut g = Graph::new();
    let x = g.constant(a.data.clone());
    let w = g.param(&p.bundle, "u.w").unwrap();
    let b = g.param(&p.bundle, "u.b").unwrap();
    let direct = g.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
    let plane = a.grid.cells();
    for (u, v) in fused.data.data()[..8 * plane].iter().zip(g.data(direct)) {
        assert!((u - v).abs() < 1e-4, "{u} vs {v}");
    }
    assert_eq!(fused.confidence(), a.confidence());
}

#[test]
fn disjoint_footprints_fuse_to_union() {
    let e = random_ego(7);
    let grid = Grid { x0: 0, y0: 0, width: 40, height: 20 };
    let a = warp_to_allo(&e, Pose::new(9, 2, 1), grid).unwrap();
    let b = warp_to_allo(&e, Pose::new(29, 2, 1), grid).unwrap();
    let f = fuse_maps(&params(), &[a.clone(), b.clone()]).unwrap();
    for i in 0..grid.cells() {
        let inside = a.confidence()[i] > 0.0 || b.confidence()[i] > 0.0;
        assert_eq!(f.confidence()[i] > 0.0, inside);
    }
}

#[test]
fn fusion_rejects_grid_mismatch() {
    let e = random_ego(8);
    let a = warp_to_allo(&e, Pose::new(5, 5, 0), Grid { x0: 0, y0: 0, width: 10, height: 10 }).unwrap();
    let b = warp_to_allo(&e, Pose::new(5, 5, 0), Grid { x0: 0, y0: 0, width: 12, height: 10 }).unwrap();
    assert!(matches!(fuse_maps(&params(), &[a, b]), Err(MapperError::GridMismatch(..))));
    assert_eq!(fuse_maps(&params(), &[]), Err(MapperError::NoMaps));
}

#[test]
fn freespace_probabilities_in_range() {
    let p = params();
    let maps = allo_set(3);
    let f = fuse_maps(&p, &maps).unwrap();
    let probs = predict_freespace(&p, &f).unwrap();
    assert_eq!(probs.len(), 400);
    assert!(probs.iter().all(|&q| q > 0.0 && q < 1.0));
    assert_eq!(predict_freespace(&p, &f).unwrap(), probs);
}

#[test]
fn end_to_end_gradient_through_warp_and_fusion() {
    let m = generate_map(9, 12, 12, MapStyle::Rooms).unwrap();
    let p = params();
    let grid = Grid::full(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vs = sample_view_set(&m, ViewMode::FromEnv(3), &mut rng, None, &RaycastConfig::default()).unwrap();
    let labels: Vec<f64> = free_labels(&m, &grid).into_iter().map(|b| b as u8 as f64).collect();
    let cfg = p.cfg;
    let r = grad_check_params(
        |g, b| {
            let mp = MapperParams { cfg, bundle: b.clone() };
            let fused = map_views_graph(g, &mp, &vs, &grid).map_err(|e| match e {
                MapperError::Autograd(a) => a,
                other => panic!("{other}"),
            })?;
            let l = freespace_graph(g, b, fused)?;
            g.bce_with_logits(l, &labels)
        },
        &p.bundle,
        &["psi1.w", "psi2.w", "g.w", "phi.w", "u.w"],
        1e-5,
        Some(6),
        3,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn short_training_beats_init_and_is_reproducible() {
    let train: Vec<GridMap> = (0..4).map(|s| generate_map(100 + s, 12, 12, MapStyle::Rooms).unwrap()).collect();
    let held: Vec<GridMap> = (0..2).map(|s| generate_map(200 + s, 12, 12, MapStyle::Rooms).unwrap()).collect();
    let cfg = MapperTrainConfig { iters: 40, views: vec![6, 10], ..MapperTrainConfig::default() };
    let (trained, log) = train_mapper(&train, &cfg).unwrap();
    let init = MapperParams::init(cfg.seed, cfg.model);
    let before = eval_freespace_loss(&init, &held, 10, 5).unwrap();
    let after = eval_freespace_loss(&trained, &held, 10, 5).unwrap();
    assert!(after < before, "{after} !< {before}");
    let (_, log2) = train_mapper(&train, &cfg).unwrap();
    assert_eq!(log.losses, log2.losses);
}
