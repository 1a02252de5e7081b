use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn check<F>(f: F, inputs: &[Tensor], seed: u64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutogradError>,
{
    let r = grad_check(f, inputs, H, None, seed).unwrap();
    assert!(r.passes(TOL), "grad check failed: {r:?}");
    r
}

#[test]
fn sum_grad_is_ones() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, -2.0, 3.5]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn mse_self_grad_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3, -1.0]));
    let l = g.mse(x, x).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.backward(x), Err(AutogradError::NonScalarLoss(vec![2])));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    assert!(err.to_string().starts_with("add:"), "{err}");
    let w = g.input(Tensor::zeros(&[4, 5]));
    let err = g.dense(a, w, None).unwrap_err();
    assert!(err.to_string().contains("dense") && err.to_string().contains("[2, 3]"), "{err}");
}

#[test]
fn backward_accumulates_until_reset() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn channel_max_single_channel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = rand_tensor(&mut rng, &[1, 4, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let y = g.channel_max(x, 1).unwrap();
    assert_eq!(g.value(y), &t);
}

#[test]
fn warp_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = rand_tensor(&mut rng, &[3, 6, 7], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let y = g.bilinear_warp(x, 6, 7, &RigidTransform::identity()).unwrap();
    assert_eq!(g.value(y), &t);
}

#[test]
fn warp_quarter_turn_is_a_permutation() {
    // Output (r, c) reads input (-c + n-1, r) under one quarter turn with translation n-1.
    let n = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_tensor(&mut rng, &[2, n, n], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let tf = RigidTransform::quarter_turns(1, (n - 1) as f64, 0.0);
    let y = g.bilinear_warp(x, n, n, &tf).unwrap();
    let out = g.data(y);
    for ch in 0..2 {
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = (n - 1 - c, r);
                assert_eq!(out[(ch * n + r) * n + c].to_bits(), t.data()[(ch * n + sr) * n + sc].to_bits());
            }
        }
    }
    // Four quarter turns compose to the identity.
    let mut cur = x;
    for _ in 0..4 {
        cur = g.bilinear_warp(cur, n, n, &tf).unwrap();
    }
    assert_eq!(g.value(cur), &t);
}

#[test]
fn conv_same_padding_shape() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 5, 5]));
    let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
    let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[4, 5, 5]);
    let y2 = g.conv2d(x, w, None, 2, Padding::Same).unwrap();
    assert_eq!(g.shape(y2), &[4, 3, 3]);
    let y3 = g.conv2d(x, w, None, 1, Padding::Valid).unwrap();
    assert_eq!(g.shape(y3), &[4, 3, 3]);
}

#[test]
fn conv_matches_direct_sum() {
    // Independent direct evaluation of the correlation with zero padding.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, h, w, o, k, s) = (2, 6, 5, 3, 3, 2);
    let xt = rand_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut rng, &[o, c, k, k], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input(xt.clone());
    let wv = g.input(wt.clone());
    let y = g.conv2d(x, wv, None, s, Padding::Same).unwrap();
    let (oh, ow) = (3, 3);
    assert_eq!(g.shape(y), &[o, oh, ow]);
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as i64 - 1;
                            let ix = (ox * s + kx) as i64 - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt.data()[((oc * c + ic) * k + ky) * k + kx] * xt.data()[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                assert!((g.data(y)[(oc * oh + oy) * ow + ox] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn masked_conv_ignores_and_freezes_masked_taps() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(&[1, 3, 3], 1.0));
    let w = g.input(Tensor::filled(&[1, 1, 3, 3], 2.0));
    let mask: std::sync::Arc<[bool]> = (0..9).map(|i| i == 4).collect();
    let y = g.conv2d_masked(x, w, None, 1, Padding::Same, mask).unwrap();
    assert_eq!(g.data(y), &[2.0; 9]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let gw = g.grad(w).unwrap();
    assert_eq!(gw[4], 9.0);
    assert!(gw.iter().enumerate().all(|(i, v)| i == 4 || *v == 0.0));
}

#[test]
fn relu_at_zero_is_skipped() {
    let r = grad_check(|g, v| Ok(g.relu(v[0])), &[Tensor::vector(vec![0.0, 0.7])], H, None, 0).unwrap();
    assert_eq!(r.skipped, vec![(0, 0)]);
    assert_eq!(r.checked, 1);
    assert!(r.max_rel_err <= TOL);
}

#[test]
fn every_op_passes_grad_check() {
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let n = rng.gen_range(1..6);
        let m = rng.gen_range(1..5);
        let b = rng.gen_range(1..4);
        let a = rand_tensor(&mut rng, &[b, n], -2.0, 2.0);
        let c = rand_tensor(&mut rng, &[b, n], -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &[b, n], 0.5, 2.0);
        check(|g, v| g.add(v[0], v[1]), &[a.clone(), c.clone()], trial);
        check(|g, v| g.sub(v[0], v[1]), &[a.clone(), c.clone()], trial);
        check(|g, v| g.mul(v[0], v[1]), &[a.clone(), c.clone()], trial);
        check(|g, v| g.div(v[0], v[1]), &[a.clone(), pos.clone()], trial);
        check(|g, v| Ok(g.scale(v[0], -1.7)), &[a.clone()], trial);
        check(|g, v| Ok(g.add_scalar(v[0], 0.3)), &[a.clone()], trial);
        check(|g, v| Ok(g.relu(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.sigmoid(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.tanh(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.abs(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.exp(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.ln(v[0])), &[pos.clone()], trial);
        check(|g, v| Ok(g.softplus(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.sum(v[0])), &[a.clone()], trial);
        check(|g, v| Ok(g.mean(v[0])), &[a.clone()], trial);
        check(|g, v| g.softmax(v[0]), &[a.clone()], trial);
        check(|g, v| g.mse(v[0], v[1]), &[a.clone(), c.clone()], trial);
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        check(|g, v| g.cross_entropy(v[0], &targets), &[a.clone()], trial);
        let bt: Vec<f64> = (0..b * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        check(|g, v| g.bce_with_logits(v[0], &bt), &[a.clone()], trial);

        let w = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[m], -1.0, 1.0);
        check(|g, v| g.dense(v[0], v[1], Some(v[2])), &[a.clone(), w.clone(), bias.clone()], trial);
        let x1 = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        check(|g, v| g.dense(v[0], v[1], None), &[x1.clone(), w.clone()], trial);

        check(|g, v| g.concat(&[v[0], v[1]]), &[a.clone(), c.clone()], trial);
        check(|g, v| g.stack(&[v[0], v[1]]), &[a.clone(), c.clone()], trial);
        check(|g, v| g.slice(v[0], 0, 1), &[a.clone()], trial);
        check(|g, v| g.row(v[0], b - 1), &[a.clone()], trial);
        check(|g, v| g.reshape(v[0], &[b * n]), &[a.clone()], trial);
        let wts = rand_tensor(&mut rng, &[b], -1.0, 1.0);
        check(|g, v| g.weighted_sum(v[0], v[1]), &[wts, a.clone()], trial);

        let (ch, hh, ww) = (rng.gen_range(1..3), rng.gen_range(3..7), rng.gen_range(3..7));
        let img = rand_tensor(&mut rng, &[ch, hh, ww], -1.0, 1.0);
        let k = [1, 3][rng.gen_range(0..2)];
        let oc = rng.gen_range(1..4);
        let ker = rand_tensor(&mut rng, &[oc, ch, k, k], -1.0, 1.0);
        let kb = rand_tensor(&mut rng, &[oc], -1.0, 1.0);
        let stride = rng.gen_range(1..3);
        check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, Padding::Same), &[img.clone(), ker.clone(), kb.clone()], trial);
        check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, Padding::Valid), &[img.clone(), ker.clone(), kb.clone()], trial);
        let mask: std::sync::Arc<[bool]> = (0..ker.len()).map(|_| rng.gen_bool(0.5)).collect();
        check(|g, v| g.conv2d_masked(v[0], v[1], Some(v[2]), 1, Padding::Same, mask.clone()), &[img.clone(), ker.clone(), kb.clone()], trial);
        let picks: Vec<usize> = (0..5).map(|_| rng.gen_range(0..img.len())).collect();
        check(|g, v| g.gather(v[0], &picks), &[img.clone()], trial);
        let grouped = rand_tensor(&mut rng, &[4 * ch, hh, ww], -1.0, 1.0);
        check(|g, v| g.channel_max(v[0], 4), &[grouped], trial);
        check(|g, v| g.upsample(v[0], 2), &[img.clone()], trial);
        let mask = rand_tensor(&mut rng, &[1, hh, ww], 0.5, 2.0);
        check(|g, v| g.mul_bcast(v[0], v[1]), &[img.clone(), mask.clone()], trial);
        check(|g, v| g.div_bcast(v[0], v[1]), &[img.clone(), mask.clone()], trial);
        let angle = rng.gen_range(-3.1..3.1);
        let tf = RigidTransform::from_angle(angle, rng.gen_range(-1.0..3.0), rng.gen_range(-1.0..3.0));
        check(|g, v| g.bilinear_warp(v[0], hh + 1, ww, &tf), &[img.clone()], trial);

        let hid = rng.gen_range(1..5);
        let mut p = ParamBundle::new(trial);
        p.init_gru("gru", n, hid);
        let h0 = rand_tensor(&mut rng, &[hid], -1.0, 1.0);
        check(|g, v| gru_cell(g, &p, "gru", v[0], v[1]), &[x1.clone(), h0.clone()], trial);
        let names: Vec<String> = p.names().cloned().collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let r = grad_check_params(
            |g, p| {
                let x = g.constant(x1.clone());
                let h = g.constant(h0.clone());
                gru_cell(g, p, "gru", x, h)
            },
            &p,
            &refs,
            H,
            None,
            trial,
        )
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = rand_tensor(&mut rng, &[7, 11], -30.0, 30.0);
    let mut g = Graph::new();
    let x = g.input(t);
    let y = g.softmax(x).unwrap();
    for row in g.data(y).chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let f = |g: &mut Graph, x: Var| -> Var {
            let wv = g.constant(w.clone());
            let y = g.dense(x, wv, None).unwrap();
            let t = g.tanh(y);
            g.sum(t)
        };
        let gfun = |g: &mut Graph, x: Var| -> Var {
            let s = g.sigmoid(x);
            let m = g.mul(s, x).unwrap();
            g.mean(m)
        };
        let grad_of = |which: u8| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.input(xt.clone());
            let l = match which {
                0 => f(&mut g, x),
                1 => gfun(&mut g, x),
                _ => {
                    let fv = f(&mut g, x);
                    let gv = gfun(&mut g, x);
                    let fa = g.scale(fv, a);
                    let gb = g.scale(gv, b);
                    g.add(fa, gb).unwrap()
                }
            };
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..5 {
            prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_normalized(seed in 0u64..10_000, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, &[3, n], -50.0, 50.0);
        let mut g = Graph::new();
        let x = g.input(t);
        let y = g.softmax(x).unwrap();
        for row in g.data(y).chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn adam_zero_grads_leave_params() {
    let mut p = ParamBundle::new(3);
    p.init_dense("l", 4, 2);
    let before = p.clone();
    let mut grads = Grads::default();
    for (k, t) in p.iter() {
        grads.insert(k.clone(), vec![0.0; t.len()]);
    }
    let mut st = AdamState::new();
    for _ in 0..10 {
        st.step(&mut p, &grads, &LrSchedule::constant(1e-2));
    }
    assert_eq!(p, before);
}

#[test]
fn adam_quadratic_bowl() {
    let mut p = ParamBundle::new(0);
    p.init_uniform("w", &[6], 1.0);
    let sched = LrSchedule::constant(0.05);
    let mut st = AdamState::new();
    for _ in 0..500 {
        let mut g = Graph::new();
        let w = g.param(&p, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        st.step(&mut p, &g.param_grads(), &sched);
    }
    let norm = p.get("w").unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "norm {norm}");
    assert_eq!(st.moment_len("w"), Some(6));
}

#[test]
fn lr_schedule_trace() {
    let s = LrSchedule { base: 1e-3, boundaries: vec![100, 200], factor: 0.1 };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    assert!(close(s.lr_at(0), 1e-3) && close(s.lr_at(99), 1e-3));
    assert!(close(s.lr_at(100), 1e-4) && close(s.lr_at(199), 1e-4));
    assert!(close(s.lr_at(200), 1e-5) && close(s.lr_at(299), 1e-5));
    assert_eq!(LrSchedule::thirds(1.0, 300).boundaries, vec![100, 200]);
}

fn train_toy(seed: u64, steps: usize) -> ParamBundle {
    let mut p = ParamBundle::new(seed);
    p.init_dense("a", 3, 4);
    p.init_dense("b", 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = AdamState::new();
    for _ in 0..steps {
        let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let t: Vec<usize> = (0..5).map(|_| rng.gen_range(0..2)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let h = dense_layer(&mut g, &p, "a", xv).unwrap();
        let h = g.relu(h);
        let o = dense_layer(&mut g, &p, "b", h).unwrap();
        let l = g.cross_entropy(o, &t).unwrap();
        g.backward(l).unwrap();
        st.step(&mut p, &g.param_grads(), &LrSchedule::thirds(1e-2, steps));
    }
    p
}

#[test]
fn optimizer_is_deterministic() {
    let a = train_toy(11, 50);
    let b = train_toy(11, 50);
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn param_init_is_order_independent() {
    let mut a = ParamBundle::new(5);
    a.init_dense("x", 3, 3);
    a.init_dense("y", 2, 2);
    let mut b = ParamBundle::new(5);
    b.init_dense("y", 2, 2);
    b.init_dense("x", 3, 3);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let p = train_toy(2, 20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &p, 20).unwrap();
    let (q, step) = load_checkpoint(&path).unwrap();
    assert_eq!(step, 20);
    assert_eq!(q.seed, p.seed);
    for ((ka, x), (kb, y)) in p.iter().zip(q.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(x.shape(), y.shape());
        for (u, v) in x.data().iter().zip(y.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}
