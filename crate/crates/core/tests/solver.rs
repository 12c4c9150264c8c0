mod common;

use common::*;
use snows::hvp::{cg_solve, hvp, norm, CgConfig, HvpMode, Objective};
use snows::masks::{Mask, MaskKind};
use snows::newton::{armijo_search, newton_step, optimize_layer, NewtonConfig, StepStatus};
use snows::oracles::{
    brute_hessian, closed_form_k0, direct_newton, fd_hessian, fisher_matrix, fisher_matvec, fisher_newton_step,
    per_sample_grads, sgd_baseline, toy_quadratic, DenseSystem, ToyQuadratic, DEFAULT_CAP,
};
use snows::oracles::linalg::{add_diag, matvec};
use snows::{Rng, Tensor};

fn mlp_task(k: usize, s: f64) -> snows::recon::ReconstructionTask {
    let net = graph(MLP, 3, 0.5);
    let x = batch(&net, 12, 4);
    let m = Mask::magnitude_unstructured(net.weight("w2").unwrap(), s).unwrap();
    task(&net, 2, k, &["w2"], vec![m], &x)
}

// ---- recon ----

#[test]
fn loss_is_zero_at_dense_weights() {
    let t = mlp_task(2, 0.0);
    let x0 = t.initial_point().unwrap();
    assert_eq!(t.loss(&x0).unwrap(), 0.0);
    assert!(t.loss_grad(&x0).unwrap().1.iter().all(|&v| v == 0.0));
}

#[test]
fn k0_dense_loss_is_direct_residual() {
    let net = graph(DENSE1, 1, 1.0);
    let x = batch(&net, 10, 2);
    let w = net.weight("w").unwrap();
    let m = Mask::magnitude_unstructured(w, 0.5).unwrap();
    let t = task(&net, 0, 0, &["w"], vec![m.clone()], &x);
    let wh = m.apply(w).unwrap();
    let want = x.matmul(w).unwrap().sub(&x.matmul(&wh).unwrap()).unwrap().sumsq();
    let got = t.loss_full(std::slice::from_ref(&wh)).unwrap();
    assert!((got - want).abs() <= 1e-12 * want);
    // grad = −2Xᵀ(Y − XŴ) at active indices
    let g = t.loss_grad(&t.initial_point().unwrap()).unwrap().1;
    let r = x.matmul(w).unwrap().sub(&x.matmul(&wh).unwrap()).unwrap();
    let full = x.matmul_tn(&r).unwrap().scale(-2.0);
    let want: Vec<f64> = m.active().iter().map(|&i| full.data()[i]).collect();
    assert!(rel(&g, &want) < 1e-12);
}

#[test]
fn loss_equals_sum_of_truncated_forwards() {
    let net = graph(MLP, 5, 0.5);
    let x = batch(&net, 7, 1);
    let m = Mask::magnitude_nm(net.weight("w1").unwrap(), 2, 4).unwrap();
    let t = task(&net, 0, 3, &["w1"], vec![m.clone()], &x);
    let mut pruned = net.clone();
    pruned.replace_weight("w1", m.apply(net.weight("w1").unwrap()).unwrap()).unwrap();
    let mut want = 0.0;
    for (k, &idx) in t.sub().targets().iter().enumerate() {
        let ref_out = net.forward_range(net.input(&x).unwrap(), 0, idx + 1, &[]).unwrap().0.x;
        let got = pruned.forward_range(pruned.input(&x).unwrap(), 0, idx + 1, &[]).unwrap().0.x;
        assert_eq!(ref_out, t.targets()[k]);
        want += got.sub(&ref_out).unwrap().sumsq();
    }
    let l = t.loss(&t.initial_point().unwrap()).unwrap();
    assert!((l - want).abs() <= 1e-12 * want);
}

#[test]
fn grad_active_matches_central_differences() {
    let t = mlp_task(2, 0.5);
    let x0 = t.initial_point().unwrap();
    let (_, g) = t.loss_grad(&x0).unwrap();
    let h = 1e-5;
    for i in 0..x0.len() {
        let mut p = x0.clone();
        p[i] += h;
        let mut q = x0.clone();
        q[i] -= h;
        let fd = (t.loss(&p).unwrap() - t.loss(&q).unwrap()) / (2.0 * h);
        assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {} vs {fd}", g[i]);
    }
    // scattering puts zeros exactly at masked positions
    let full = t.weights_at(&g).unwrap();
    let mask = &t.active().masks()[0];
    for (v, &k) in full[0].data().iter().zip(mask.pattern()) {
        if !k {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn batch_views_decompose_the_loss() {
    let t = mlp_task(2, 0.5);
    let x0 = t.initial_point().unwrap();
    let full = t.loss_grad(&x0).unwrap();
    let one = t.batch_view(0, 12, 9, 0).unwrap().loss_grad(&x0).unwrap();
    assert!((full.0 - one.0).abs() <= 1e-12 * full.0);
    assert!(rel(&one.1, &full.1) < 1e-12);
    let parts: f64 = (0..3).map(|b| t.batch_view(b, 5, 9, 0).unwrap().loss(&x0).unwrap()).sum();
    assert!((parts - full.0).abs() <= 1e-12 * full.0);
    let a = t.batch_view(1, 5, 9, 0).unwrap();
    let b = t.batch_view(1, 5, 9, 0).unwrap();
    assert_eq!(a.inputs(), b.inputs());
}

#[test]
fn longer_horizon_never_lowers_the_loss() {
    let x0 = mlp_task(0, 0.5).initial_point().unwrap();
    let losses: Vec<f64> = (0..3).map(|k| mlp_task(k, 0.5).loss(&x0).unwrap()).collect();
    assert!(losses[0] <= losses[1] && losses[1] <= losses[2], "{losses:?}");
}

// ---- hvp ----

#[test]
fn zero_direction_gives_zero_product() {
    let t = mlp_task(1, 0.5);
    let x0 = t.initial_point().unwrap();
    let g = t.loss_grad(&x0).unwrap().1;
    let z = vec![0.0; x0.len()];
    assert_eq!(hvp(&t, &x0, &z, &g, HvpMode::Exact).unwrap(), z);
}

#[test]
fn k0_dense_hessian_is_two_xtx() {
    let net = graph(DENSE1, 2, 1.0);
    let x = batch(&net, 9, 3);
    let m = Mask::magnitude_unstructured(net.weight("w").unwrap(), 0.4).unwrap();
    let t = task(&net, 0, 0, &["w"], vec![m.clone()], &x);
    let x0 = t.initial_point().unwrap();
    let v: Vec<f64> = (0..x0.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let hv = hvp(&t, &x0, &v, &[], HvpMode::Exact).unwrap();
    let vf = t.weights_at(&v).unwrap().remove(0);
    let xtx = x.matmul_tn(&x).unwrap();
    let full = xtx.matmul(&vf).unwrap().scale(2.0);
    let want: Vec<f64> = m.active().iter().map(|&i| full.data()[i]).collect();
    assert!(rel(&hv, &want) < 1e-12);
}

#[test]
fn both_hvp_modes_match_brute_force_hessian() {
    let t = mlp_task(2, 0.5);
    let x0 = t.initial_point().unwrap();
    assert!(x0.len() <= 50);
    let g = t.loss_grad(&x0).unwrap().1;
    let h = fd_hessian(&t, &x0, 1e-4, DEFAULT_CAP).unwrap();
    let mut rng = Rng::new(8);
    for _ in 0..3 {
        let v: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
        let want = matvec(&h, &v);
        let exact = hvp(&t, &x0, &v, &g, HvpMode::Exact).unwrap();
        let fd = hvp(&t, &x0, &v, &g, HvpMode::FiniteDiff { eps0: 1e-7 }).unwrap();
        assert!(rel(&exact, &want) <= 1e-6, "exact {}", rel(&exact, &want));
        assert!(rel(&fd, &want) <= 1e-4, "fd {}", rel(&fd, &want));
    }
}

#[test]
fn hessian_is_symmetric_under_probing() {
    let t = mlp_task(2, 0.3);
    let x0 = t.initial_point().unwrap();
    let mut rng = Rng::new(2);
    let u: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
    let v: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
    let hu = t.hvp_exact(&x0, &u).unwrap();
    let hv = t.hvp_exact(&x0, &v).unwrap();
    let a: f64 = u.iter().zip(&hv).map(|(p, q)| p * q).sum();
    let b: f64 = v.iter().zip(&hu).map(|(p, q)| p * q).sum();
    assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()));
}

#[test]
fn active_block_is_the_restricted_full_hessian() {
    let net = graph(MLP, 3, 0.5);
    let x = batch(&net, 12, 4);
    let w = net.weight("w2").unwrap();
    let full_t = task(&net, 2, 2, &["w2"], vec![Mask::ones(&[6, 4])], &x);
    let m = Mask::magnitude_unstructured(w, 0.5).unwrap();
    let masked_t = task(&net, 2, 2, &["w2"], vec![m.clone()], &x);
    // evaluate both at the masked point
    let xm = masked_t.initial_point().unwrap();
    let xf = full_t.active().gather(&masked_t.weights_at(&xm).unwrap()).unwrap();
    let hf = brute_hessian(&full_t, &xf, DEFAULT_CAP).unwrap();
    let hm = brute_hessian(&masked_t, &xm, DEFAULT_CAP).unwrap();
    let act = m.active();
    let n = 24;
    for (p, &i) in act.iter().enumerate() {
        for (q, &j) in act.iter().enumerate() {
            let a = hm.h.data()[p * act.len() + q];
            let b = hf.h.data()[i * n + j];
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }
    // the masked problem's full-shape embedding has zero rows/cols
    let embedded = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        match (act.iter().position(|&a| a == i), act.iter().position(|&a| a == j)) {
            (Some(p), Some(q)) => hm.h.data()[p * act.len() + q],
            _ => 0.0,
        }
    });
    for (i, &keep) in m.pattern().iter().enumerate() {
        if !keep {
            assert!((0..n).all(|j| embedded.data()[i * n + j] == 0.0 && embedded.data()[j * n + i] == 0.0));
        }
    }
}

#[test]
fn cg_on_task_counts_one_product_per_iteration() {
    let t = mlp_task(2, 0.5);
    let x0 = t.initial_point().unwrap();
    let g = t.loss_grad(&x0).unwrap().1;
    let mut calls = 0;
    let cfg = CgConfig { tol: 1e-8, ..CgConfig::default() };
    let r = cg_solve(
        |v| {
            calls += 1;
            hvp(&t, &x0, v, &g, HvpMode::Exact)
        },
        &g,
        &cfg,
    )
    .unwrap();
    assert_eq!(calls, r.hvp_calls);
    assert_eq!(r.hvp_calls, r.iters);
    let sys = brute_hessian(&t, &x0, DEFAULT_CAP).unwrap();
    let mut res = matvec(&add_diag(&sys.h, cfg.lambda), &r.delta);
    for (a, b) in res.iter_mut().zip(&g) {
        *a += b;
    }
    assert!((norm(&res) - r.residual_norm).abs() <= 1e-4 * norm(&res).max(1e-9));
}

// ---- oracles ----

#[test]
fn brute_hessian_k0_is_block_diagonal() {
    let net = graph(DENSE1, 7, 1.0);
    let x = batch(&net, 10, 1);
    let t = task(&net, 0, 0, &["w"], vec![Mask::ones(&[8, 3])], &x);
    let sys = brute_hessian(&t, &t.initial_point().unwrap(), DEFAULT_CAP).unwrap();
    let xtx = x.matmul_tn(&x).unwrap();
    // flat index i*3 + o; blocks couple equal o only
    for a in 0..24 {
        for b in 0..24 {
            let (ia, oa, ib, ob) = (a / 3, a % 3, b / 3, b % 3);
            let want = if oa == ob { 2.0 * xtx.data()[ia * 8 + ib] } else { 0.0 };
            assert!((sys.h.data()[a * 24 + b] - want).abs() < 1e-10);
        }
    }
    assert!(sys.asymmetry() <= 1e-8 * sys.h_norm());
}

#[test]
fn hvp_and_difference_assemblies_agree() {
    let net = graph(CONV, 4, 0.4);
    let x = batch(&net, 3, 2);
    let m = Mask::magnitude_unstructured(net.weight("c").unwrap(), 0.6).unwrap();
    let t = task(&net, 0, 2, &["c"], vec![m], &x);
    let x0 = t.initial_point().unwrap();
    let a = brute_hessian(&t, &x0, DEFAULT_CAP).unwrap();
    let b = fd_hessian(&t, &x0, 1e-4, DEFAULT_CAP).unwrap();
    let scale = a.h.data().iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let worst = a.h.data().iter().zip(b.data()).fold(0.0f64, |s, (p, q)| s.max((p - q).abs()));
    assert!(worst / scale <= 1e-4, "{}", worst / scale);
    assert!(a.asymmetry() <= 1e-8 * a.h_norm());
}

#[test]
fn direct_newton_cases() {
    let sys = DenseSystem {
        h: Tensor::eye(3),
        g: vec![1.0, 0.0, 0.0],
    };
    assert_eq!(direct_newton(&sys, 0.0).unwrap(), vec![-1.0, 0.0, 0.0]);
    let bad = DenseSystem {
        h: Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, -2.0]).unwrap(),
        g: vec![1.0, 1.0],
    };
    let err = direct_newton(&bad, 0.0).unwrap_err().to_string();
    assert!(err.contains("smallest eigenvalue"), "{err}");
}

#[test]
fn cg_matches_direct_newton_on_task_systems() {
    for s in [0.0, 0.5, 0.75] {
        let t = mlp_task(2, s);
        let x0 = t.initial_point().unwrap();
        let mut x1 = x0.clone();
        x1.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i * 7) as f64).cos());
        let sys = brute_hessian(&t, &x1, DEFAULT_CAP).unwrap();
        let lambda = 1e-2;
        let want = direct_newton(&sys, lambda).unwrap();
        let cfg = CgConfig { tol: 1e-10, lambda, max_iters: 1000, ..CgConfig::default() };
        let got = cg_solve(|v| Ok(matvec(&sys.h, v)), &sys.g, &cfg).unwrap();
        assert!(rel(&got.delta, &want) <= 1e-6, "{}", rel(&got.delta, &want));
    }
}

#[test]
fn closed_form_recovers_dense_weights() {
    let net = graph(DENSE1, 11, 1.0);
    let x = batch(&net, 20, 5);
    let t = task(&net, 0, 0, &["w"], vec![Mask::ones(&[8, 3])], &x);
    let w = closed_form_k0(&t, 0.0, None).unwrap();
    assert!(rel(w.data(), net.weight("w").unwrap().data()) < 1e-10);
}

#[test]
fn closed_form_two_of_four_by_hand() {
    let json = r#"{"input_shape": [4], "weights": {"w": [4, 1]},
        "ops": [{"kind": "dense", "weight": "w", "target": true}]}"#;
    let net = graph(json, 3, 1.0);
    let x = batch(&net, 5, 6);
    let keep = vec![true, false, true, false];
    let m = Mask::from_pattern(&[4, 1], keep, MaskKind::NOfM { n: 2, m: 4 }).unwrap();
    let t = task(&net, 0, 0, &["w"], vec![m], &x);
    let w = closed_form_k0(&t, 0.0, None).unwrap();
    // 2×2 normal equations on columns 0 and 2, solved by Cramer's rule
    let y = &t.targets()[0];
    let col = |j: usize| (0..5).map(|r| x.data()[r * 4 + j]).collect::<Vec<f64>>();
    let (a, b) = (col(0), col(2));
    let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).sum::<f64>();
    let (aa, ab, bb) = (dot(&a, &a), dot(&a, b.as_slice()), dot(&b, &b));
    let (ay, by) = (dot(&a, y.data()), dot(&b, y.data()));
    let det = aa * bb - ab * ab;
    let w0 = (ay * bb - ab * by) / det;
    let w2 = (aa * by - ab * ay) / det;
    assert!((w.data()[0] - w0).abs() < 1e-12 && (w.data()[2] - w2).abs() < 1e-12);
    assert_eq!(w.data()[1], 0.0);
    assert_eq!(w.data()[3], 0.0);
}

#[test]
fn fisher_rank_one_and_matrix_free() {
    let t = mlp_task(2, 0.5);
    let x0 = t.initial_point().unwrap();
    let mut x1 = x0.clone();
    x1[0] += 0.3;
    let single = t.view(&[3]).unwrap();
    let step = fisher_newton_step(&single, &x1, 1e-4, DEFAULT_CAP, &CgConfig::default()).unwrap();
    assert!(step.explicit && step.delta.iter().all(|v| v.is_finite()));
    let grads = per_sample_grads(&t, &x1).unwrap();
    let m = x1.len();
    let f = fisher_matrix(&grads, m);
    let mut rng = Rng::new(1);
    for _ in 0..3 {
        let v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let a = matvec(&f, &v);
        let b = fisher_matvec(&grads, &v);
        assert!(rel(&b, &a) < 1e-8);
        let vfv: f64 = v.iter().zip(&a).map(|(p, q)| p * q).sum();
        assert!(vfv >= 0.0);
    }
    // the per-sample gradients sum to the batch gradient
    let total: Vec<f64> = (0..m).map(|i| grads.iter().map(|g| g[i]).sum()).collect();
    assert!(rel(&total, &t.loss_grad(&x1).unwrap().1) < 1e-10);
    // the matrix-free path agrees with the explicit one
    let t4 = t.view(&[0, 1, 2, 3]).unwrap();
    let cg = CgConfig { tol: 1e-12, max_iters: 2000, ..CgConfig::default() };
    let e = fisher_newton_step(&t4, &x1, 1e-2, DEFAULT_CAP, &cg).unwrap();
    let i = fisher_newton_step(&t4, &x1, 1e-2, 0, &cg).unwrap();
    assert!(!i.explicit);
    assert!(rel(&i.delta, &e.delta) < 1e-6);
}

#[test]
fn sgd_one_dimensional_exact_step() {
    let json = r#"{"input_shape": [1], "weights": {"w": [1, 1]},
        "ops": [{"kind": "dense", "weight": "w", "target": true}]}"#;
    let net = graph(json, 1, 1.0);
    let x = Tensor::from_f64(&[1, 1], &[1.5]).unwrap();
    let t = task(&net, 0, 0, &["w"], vec![Mask::ones(&[1, 1])], &x);
    let curvature = 2.0 * 1.5 * 1.5;
    let out = sgd_baseline(&t, vec![0.3], 1.0 / curvature, 1, 1, 0).unwrap();
    assert!((out.x[0] - net.weight("w").unwrap().data()[0]).abs() < 1e-12);
}

#[test]
fn sgd_contracts_w1_and_zeroes_w2() {
    let toy = ToyQuadratic { l1: 1.0, l2: 100.0 };
    let out = sgd_baseline(&toy, vec![1.0, 1.0], 0.01, 5, 1, 0).unwrap();
    assert_eq!(out.rows.len(), 5);
    assert!((out.x[0] - 0.99f64.powi(5)).abs() < 1e-15);
    assert_eq!(out.x[1], 0.0);
}

#[test]
fn toy_quadratic_report() {
    let r = toy_quadratic(1.0, 100.0, [1.0, 1.0], 0.01, 1e-6).unwrap();
    assert_eq!(r.kappa, 100.0);
    assert_eq!(r.sgd_iters_closed_form, Some(1375));
    assert_eq!(r.sgd_iters_numeric, Some(1375));
    assert_eq!(r.w2_after_one_sgd_step, 0.0);
    assert_eq!(r.newton_steps, 1);
    assert!(r.newton_after_one_step.iter().all(|v| v.abs() < 1e-12));
    assert_eq!(r.direct_newton_after_one_step, [0.0, 0.0]);
    assert!(!r.diverges);
    let bad = toy_quadratic(1.0, 100.0, [1.0, 1.0], 0.02, 1e-6).unwrap();
    assert!(bad.diverges);
    assert_eq!(bad.sgd_iters_numeric, None);
}

// ---- newton ----

#[test]
fn newton_at_optimum_does_nothing() {
    let t = mlp_task(2, 0.0);
    let mut x = t.initial_point().unwrap();
    let before = x.clone();
    let r = newton_step(&t, &mut x, &NewtonConfig::default()).unwrap();
    assert_eq!(r.status, StepStatus::Stationary);
    assert_eq!(x, before);
}

#[test]
fn k0_newton_lands_on_closed_form() {
    for (json, name) in [(DENSE1, "w"), (CONV, "c")] {
        let net = graph(json, 13, 0.5);
        let x = batch(&net, 16, 3);
        let m = Mask::magnitude_nm(net.weight(name).unwrap(), 2, 4).unwrap();
        let t = task(&net, 0, 0, &[name], vec![m], &x);
        let cfg = NewtonConfig {
            batch_size: 16,
            cg: CgConfig { lambda: 0.0, tol: 1e-12, max_iters: 1000, ..CgConfig::default() },
            ..NewtonConfig::default()
        };
        let (w, out) = optimize_layer(&t, &cfg, 0, "l").unwrap();
        assert_eq!(out.trajectory.len(), 1);
        let want = closed_form_k0(&t, 0.0, None).unwrap();
        assert!(rel(w[0].data(), want.data()) <= 1e-6, "{name}: {}", rel(w[0].data(), want.data()));
        // with damping, one step lands on the ridge solution around W ⊙ Z
        let damped = NewtonConfig {
            cg: CgConfig { lambda: 1e-1, ..cfg.cg },
            ..cfg
        };
        let (w, _) = optimize_layer(&t, &damped, 0, "l").unwrap();
        let init = t.weights_at(&t.initial_point().unwrap()).unwrap().remove(0);
        let want = closed_form_k0(&t, 1e-1, Some(&init)).unwrap();
        assert!(rel(w[0].data(), want.data()) <= 1e-6);
    }
}

#[test]
fn toy_newton_reaches_minimum_in_one_step() {
    let toy = ToyQuadratic { l1: 1.0, l2: 100.0 };
    let cfg = NewtonConfig {
        cg: CgConfig { lambda: 0.0, tol: 1e-14, ..CgConfig::default() },
        ..NewtonConfig::default()
    };
    for w0 in [[1.0, 1.0], [-3.0, 0.5], [10.0, -7.0]] {
        let mut w = w0.to_vec();
        let r = newton_step(&toy, &mut w, &cfg).unwrap();
        assert_eq!(r.alpha, 1.0);
        assert!(w.iter().all(|v| v.abs() < 1e-12), "{w:?}");
    }
}

#[test]
fn armijo_backtracks_on_overshoot() {
    let toy = ToyQuadratic { l1: 1.0, l2: 100.0 };
    let cfg = NewtonConfig::default();
    let x = [1.0, 1.0];
    let (l0, g) = toy.loss_grad(&x).unwrap();
    let newton = [-1.0, -1.0];
    assert_eq!(armijo_search(&toy, &x, &newton, &g, l0, &cfg).unwrap().unwrap().0, 1.0);
    let big = [-100.0, -100.0];
    let (alpha, loss) = armijo_search(&toy, &x, &big, &g, l0, &cfg).unwrap().unwrap();
    assert!(alpha < 1.0);
    let slope = -100.0 * g[0] - 100.0 * g[1];
    assert!(loss <= l0 + alpha * cfg.armijo_beta * slope);
    // the rejected step really fails the condition
    assert!(toy.loss(&[x[0] + 2.0 * alpha * big[0], x[1] + 2.0 * alpha * big[1]]).unwrap() > l0 + 2.0 * alpha * cfg.armijo_beta * slope);
    // tiny β accepts any strictly decreasing step
    let lax = NewtonConfig { armijo_beta: 1e-300, ..cfg };
    let dec = [-1.5, -0.015];
    assert_eq!(armijo_search(&toy, &x, &dec, &g, l0, &lax).unwrap().unwrap().0, 1.0);
    assert!(armijo_search(&toy, &x, &[1.0, 1.0], &g, l0, &cfg).is_err());
}

#[test]
fn all_ones_mask_converges_immediately() {
    let t = mlp_task(2, 0.0);
    let (w, out) = optimize_layer(&t, &NewtonConfig { batch_size: 4, ..NewtonConfig::default() }, 1, "l").unwrap();
    assert_eq!(out.loss_final, 0.0);
    assert_eq!(&w[0], t.sub().weight("w2").unwrap());
}

#[test]
fn newton_beats_long_sgd_on_two_four_layer() {
    let net = graph(MLP, 21, 0.5);
    let x = correlated_batch(&net, 256, 3, 2);
    let m = Mask::magnitude_nm(net.weight("w1").unwrap(), 2, 4).unwrap();
    let t = task(&net, 0, 3, &["w1"], vec![m.clone()], &x);
    // one batch per epoch, so ten epochs means at most ten Newton steps
    let cfg = NewtonConfig { batch_size: 256, max_epochs: 10, ..NewtonConfig::default() };
    let (w, out) = optimize_layer(&t, &cfg, 5, "w1").unwrap();
    assert!(out.loss_final < out.loss_init);
    assert!(m.holds_on(&w[0]));
    for row in &out.trajectory {
        if row.step.status == StepStatus::Accepted {
            let bound = row.step.loss_pre + row.step.alpha * cfg.armijo_beta * row.step.slope;
            assert!(row.step.loss_post <= bound);
            assert!(row.step.loss_post < row.step.loss_pre);
        }
    }
    assert!(out.trajectory.len() <= 10);
    let best_sgd = [1e-3, 1e-2, 1e-1]
        .iter()
        .map(|&lr| sgd_baseline(&t, t.initial_point().unwrap(), lr, 2000, 64, 5).unwrap())
        .filter(|o| !o.diverged)
        .map(|o| o.loss_final)
        .fold(f64::INFINITY, f64::min);
    assert!(out.loss_final <= best_sgd, "newton {} sgd {}", out.loss_final, best_sgd);
    // replay is bit-identical
    let (w2, out2) = optimize_layer(&t, &cfg, 5, "w1").unwrap();
    assert_eq!(w, w2);
    let strip = |o: &snows::newton::LayerOutcome| o.trajectory.iter().map(|r| r.step.clone()).collect::<Vec<_>>();
    assert_eq!(strip(&out), strip(&out2));
}

#[test]
fn chunked_gradient_and_hvp_match_differences() {
    let net = graph(MLP, 21, 0.5);
    let x = batch(&net, 100, 2);
    let m = Mask::magnitude_nm(net.weight("w1").unwrap(), 2, 4).unwrap();
    let t = task(&net, 0, 3, &["w1"], vec![m], &x);
    let x0 = t.initial_point().unwrap();
    let (_, g) = t.loss_grad(&x0).unwrap();
    let h = 1e-5;
    for i in 0..x0.len() {
        let mut p = x0.clone();
        p[i] += h;
        let mut q = x0.clone();
        q[i] -= h;
        let fd = (t.loss(&p).unwrap() - t.loss(&q).unwrap()) / (2.0 * h);
        assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {} vs {fd}", g[i]);
    }
    let v: Vec<f64> = (0..x0.len()).map(|i| (i as f64).cos()).collect();
    let hv = t.hvp_exact(&x0, &v).unwrap();
    let mut p = x0.clone();
    let mut q = x0.clone();
    for i in 0..v.len() {
        p[i] += h * v[i];
        q[i] -= h * v[i];
    }
    let (gp, gq) = (t.loss_grad(&p).unwrap().1, t.loss_grad(&q).unwrap().1);
    let fd: Vec<f64> = gp.iter().zip(&gq).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    assert!(rel(&hv, &fd) < 1e-6, "{}", rel(&hv, &fd));
}
