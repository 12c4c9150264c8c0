use super::*;
use crate::tensor::Rng;

fn build(json: &str, seed: u64) -> NetworkGraph {
    let manifest = Manifest::from_json(json).unwrap();
    let mut rng = Rng::new(seed);
    let mut weights = BTreeMap::new();
    for (name, shape) in &manifest.weights {
        weights.insert(name.clone(), rng.normal_tensor(shape, 0.5));
    }
    for spec in &manifest.ops {
        if let Op::BatchnormAffine { var, .. } = &spec.op {
            let v = weights[var].map(|x: f64| x.abs() + 0.5);
            weights.insert(var.clone(), v);
        }
    }
    NetworkGraph::new(manifest, weights).unwrap()
}

fn input(net: &NetworkGraph, n: usize, seed: u64) -> Tensor {
    let mut shape = vec![n];
    shape.extend(&net.manifest().input_shape);
    Rng::new(seed).normal_tensor(&shape, 1.0)
}

/// Targets from a perturbed copy of the network so the loss is not at its
/// minimum.
fn targets(net: &NetworkGraph, start: usize, k: usize, state: &Activation) -> Vec<Tensor> {
    let mut other = net.clone();
    let mut rng = Rng::new(99);
    let names: Vec<String> = net.weights().keys().cloned().collect();
    for name in names {
        let w = net.weight(&name).unwrap();
        let noise: Tensor = rng.normal_tensor(w.shape(), 0.1);
        let mut v = w.add(&noise).unwrap();
        if net.manifest().ops.iter().any(|s| matches!(&s.op, Op::BatchnormAffine { var, .. } if *var == name)) {
            v = v.map(|x| x.abs() + 0.5);
        }
        other.replace_weight(&name, v).unwrap();
    }
    other.sub_network(start, k).unwrap().forward_capture(state, &[]).unwrap()
}

fn state_at(net: &NetworkGraph, x: &Tensor, start: usize) -> Activation {
    net.forward_range(net.input(x).unwrap(), 0, start, &[]).unwrap().0
}

/// Reverse-mode gradient against central differences, h = 1e-5.
fn gradcheck(net: &NetworkGraph, start: usize, k: usize, names: &[&str]) {
    let x = input(net, 3, 7);
    let state = state_at(net, &x, start);
    let sub = net.sub_network(start, k).unwrap();
    let ys = targets(net, start, k, &state);
    let (_, grads) = sub.loss_grad(&state, &ys, &[], names).unwrap();
    let h = 1e-5;
    for name in names {
        let g = &grads[*name];
        let w0 = sub.weight(name).unwrap().clone();
        assert_eq!(g.shape(), w0.shape());
        let mut worst: f64 = 0.0;
        for i in 0..w0.numel() {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let mut wm = w0.clone();
            wm.data_mut()[i] -= h;
            let lp = sub.loss(&state, &ys, &[(name, &wp)]).unwrap();
            let lm = sub.loss(&state, &ys, &[(name, &wm)]).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (g.data()[i] - fd).abs() / fd.abs().max(g.data()[i].abs()).max(1.0);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-6, "{name}: rel err {worst:e}");
    }
}

const MLP: &str = r#"{
    "input_shape": [5],
    "weights": {"w1": [5, 6], "b1": [6], "w2": [6, 4], "b2": [4]},
    "prunable": ["w1", "w2"],
    "ops": [
        {"kind": "dense", "weight": "w1", "bias": "b1", "target": true},
        {"kind": "gelu", "target": true},
        {"kind": "dense", "weight": "w2", "bias": "b2", "target": true},
        {"kind": "softmax", "target": true}
    ]
}"#;

const CNN: &str = r#"{
    "input_shape": [2, 6, 6],
    "weights": {
        "c1": [3, 2, 3, 3], "cb1": [3],
        "g": [3], "b": [3], "m": [3], "v": [3],
        "c2": [4, 3, 2, 2], "fc": [4, 3]
    },
    "prunable": ["c1", "c2", "fc"],
    "ops": [
        {"kind": "conv2d", "weight": "c1", "bias": "cb1", "stride": 1, "padding": 1, "target": true},
        {"kind": "batchnorm_affine", "gamma": "g", "beta": "b", "mean": "m", "var": "v"},
        {"kind": "relu", "target": true},
        {"kind": "maxpool", "kernel": 2, "stride": 2},
        {"kind": "conv2d", "weight": "c2", "stride": 2, "padding": 1, "target": true},
        {"kind": "avgpool", "kernel": 2, "stride": 2},
        {"kind": "flatten"},
        {"kind": "dense", "weight": "fc", "target": true}
    ]
}"#;

const RESNET: &str = r#"{
    "input_shape": [2, 4, 4],
    "weights": {
        "c1": [2, 2, 3, 3], "g1": [2], "b1": [2], "m1": [2], "v1": [2],
        "c2": [2, 2, 3, 3], "g2": [2], "b2": [2], "m2": [2], "v2": [2],
        "c3": [2, 2, 1, 1]
    },
    "prunable": ["c1", "c2", "c3"],
    "ops": [
        {"kind": "residual_begin"},
        {"kind": "conv2d", "weight": "c1", "padding": 1, "target": true},
        {"kind": "batchnorm_affine", "gamma": "g1", "beta": "b1", "mean": "m1", "var": "v1"},
        {"kind": "relu", "target": true},
        {"kind": "conv2d", "weight": "c2", "padding": 1, "target": true},
        {"kind": "batchnorm_affine", "gamma": "g2", "beta": "b2", "mean": "m2", "var": "v2"},
        {"kind": "residual_add"},
        {"kind": "relu", "target": true},
        {"kind": "conv2d", "weight": "c3", "target": true}
    ]
}"#;

const VIT: &str = r#"{
    "input_shape": [3, 4],
    "weights": {
        "wq": [4, 4], "wk": [4, 4], "wv": [4, 4], "wo": [4, 4], "bo": [4],
        "f1": [4, 6], "f2": [6, 4]
    },
    "prunable": ["wq", "wk", "wv", "wo", "f1", "f2"],
    "ops": [
        {"kind": "residual_begin"},
        {"kind": "attention_qkv", "wq": "wq", "wk": "wk", "wv": "wv", "heads": 2, "head_dim": 2, "target": true},
        {"kind": "attention_out", "weight": "wo", "bias": "bo"},
        {"kind": "residual_add", "target": true},
        {"kind": "residual_begin"},
        {"kind": "dense", "weight": "f1", "target": true},
        {"kind": "gelu", "target": true},
        {"kind": "dense", "weight": "f2"},
        {"kind": "residual_add", "target": true}
    ]
}"#;

#[test]
fn gradcheck_dense_gelu_softmax() {
    let net = build(MLP, 1);
    gradcheck(&net, 0, 3, &["w1", "b1", "w2", "b2"]);
    gradcheck(&net, 2, 1, &["w2"]);
}

#[test]
fn gradcheck_conv_bn_pooling() {
    let net = build(CNN, 2);
    gradcheck(&net, 0, 3, &["c1", "cb1", "c2", "fc"]);
    gradcheck(&net, 4, 1, &["c2"]);
}

#[test]
fn gradcheck_residual_block() {
    let net = build(RESNET, 3);
    gradcheck(&net, 1, 4, &["c1", "c2", "c3"]);
    // starts inside the block: the skip comes from the cascaded state
    gradcheck(&net, 4, 1, &["c2"]);
}

#[test]
fn gradcheck_attention() {
    let net = build(VIT, 4);
    gradcheck(&net, 1, 4, &["wq", "wk", "wv", "wo", "bo", "f1", "f2"]);
    gradcheck(&net, 2, 1, &["wo"]);
    gradcheck(&net, 5, 2, &["f1"]);
}

#[test]
fn identity_dense_is_identity() {
    let m = Manifest::from_json(
        r#"{"input_shape": [3], "weights": {"w": [3, 3], "b": [3]},
            "ops": [{"kind": "dense", "weight": "w", "bias": "b"}]}"#,
    )
    .unwrap();
    let w: [(String, Tensor); 2] = [("w".to_string(), Tensor::eye(3)), ("b".to_string(), Tensor::zeros(&[3]))];
    let net = NetworkGraph::new(m, w.into()).unwrap();
    let x = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn dense_relu_by_hand() {
    let m = Manifest::from_json(
        r#"{"input_shape": [2], "weights": {"w": [2, 1]},
            "ops": [{"kind": "dense", "weight": "w"}, {"kind": "relu"}]}"#,
    )
    .unwrap();
    let w: Tensor = Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap();
    let net = NetworkGraph::new(m, [("w".to_string(), w)].into()).unwrap();
    let y = net.forward(&Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[0.0]);
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let r = (i * stride + p) as isize - pad as isize;
                                let s = (j * stride + q) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + r as usize) * wd + s as usize;
                                let wi = ((oc * c + ic) * kh + p) * kw + q;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    y.data_mut()[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn two_conv_net_matches_direct_convolution() {
    let m = Manifest::from_json(
        r#"{"input_shape": [1, 4, 4], "weights": {"a": [2, 1, 3, 3], "b": [3, 2, 2, 2]},
            "ops": [{"kind": "conv2d", "weight": "a", "padding": 1},
                    {"kind": "conv2d", "weight": "b", "stride": 2}]}"#,
    )
    .unwrap();
    let mut rng = Rng::new(5);
    let a: Tensor = rng.normal_tensor(&[2, 1, 3, 3], 1.0);
    let b: Tensor = rng.normal_tensor(&[3, 2, 2, 2], 1.0);
    let x: Tensor = rng.normal_tensor(&[1, 1, 4, 4], 1.0);
    let net = NetworkGraph::new(m, [("a".to_string(), a.clone()), ("b".to_string(), b.clone())].into()).unwrap();
    let want = naive_conv(&naive_conv(&x, &a, 1, 1), &b, 2, 0);
    let got = net.forward(&x).unwrap();
    assert_eq!(got.shape(), want.shape());
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn capture_k0_and_k1() {
    let net = build(MLP, 8);
    let x = input(&net, 4, 3);
    let state = net.input(&x).unwrap();
    let xw = x.matmul(net.weight("w1").unwrap()).unwrap();
    let b = net.weight("b1").unwrap();
    let pre = Tensor::from_fn(xw.shape(), |i| xw.data()[i] + b.data()[i % 6]);
    let k0 = net.sub_network(0, 0).unwrap().forward_capture(&state, &[]).unwrap();
    assert_eq!(k0, vec![pre.clone()]);
    let k1 = net.sub_network(0, 1).unwrap().forward_capture(&state, &[]).unwrap();
    assert_eq!(k1, vec![pre.clone(), pre.gelu()]);
}

#[test]
fn resnet_block_capture_matches_composition() {
    let m = Manifest::from_json(
        r#"{"input_shape": [2, 3, 3],
            "weights": {"c": [2, 2, 3, 3], "g": [2], "b": [2], "m": [2], "v": [2]},
            "ops": [{"kind": "residual_begin"},
                    {"kind": "conv2d", "weight": "c", "padding": 1, "target": true},
                    {"kind": "batchnorm_affine", "gamma": "g", "beta": "b", "mean": "m", "var": "v"},
                    {"kind": "residual_add"},
                    {"kind": "relu", "target": true}]}"#,
    )
    .unwrap();
    let mut rng = Rng::new(11);
    let mut ws = BTreeMap::new();
    for (name, shape) in &m.weights {
        ws.insert(name.clone(), rng.normal_tensor::<f64>(shape, 1.0));
    }
    ws.insert("v".into(), Tensor::from_f64(&[2], &[0.7, 1.3]).unwrap());
    let net = NetworkGraph::new(m, ws.clone()).unwrap();
    let x: Tensor = rng.normal_tensor(&[2, 2, 3, 3], 1.0);
    let state = net.forward_range(net.input(&x).unwrap(), 0, 1, &[]).unwrap().0;
    let caps = net.sub_network(1, 1).unwrap().forward_capture(&state, &[]).unwrap();
    assert_eq!(caps.len(), 2);

    let conv = naive_conv(&x, &ws["c"], 1, 1);
    let want = Tensor::from_fn(conv.shape(), |i| {
        let ch = (i / 9) % 2;
        let scale = ws["g"].data()[ch] / (ws["v"].data()[ch] + 1e-5).sqrt();
        let bn = (conv.data()[i] - ws["m"].data()[ch]) * scale + ws["b"].data()[ch];
        (bn + x.data()[i]).max(0.0)
    });
    for (g, w) in caps[1].data().iter().zip(want.data()) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn gradient_vanishes_at_dense_weights() {
    let net = build(CNN, 6);
    let x = input(&net, 2, 1);
    let state = net.input(&x).unwrap();
    let sub = net.sub_network(0, 2).unwrap();
    let ys = sub.forward_capture(&state, &[]).unwrap();
    let g = sub.grad_wrt_layer(&ys, "c1", &state).unwrap();
    assert_eq!(g.shape(), &[3, 2, 3, 3]);
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn k0_dense_gradient_is_least_squares() {
    let net = build(MLP, 9);
    let sub = net.sub_network(2, 0).unwrap();
    let x: Tensor = Rng::new(2).normal_tensor(&[5, 6], 1.0);
    let y: Tensor = Rng::new(3).normal_tensor(&[5, 4], 1.0);
    let w = net.weight("w2").unwrap();
    let b = net.weight("b2").unwrap();
    let g = sub.grad_wrt_layer(std::slice::from_ref(&y), "w2", &Activation::new(x.clone())).unwrap();
    let xw = x.matmul(w).unwrap();
    let r = Tensor::from_fn(y.shape(), |i| y.data()[i] - xw.data()[i] - b.data()[i % 4]);
    let want = x.matmul_tn(&r).unwrap().scale(-2.0);
    for (a, e) in g.data().iter().zip(want.data()) {
        assert!((a - e).abs() < 1e-12 * e.abs().max(1.0));
    }
}

#[test]
fn weight_outside_window_is_rejected() {
    let net = build(MLP, 1);
    let sub = net.sub_network(0, 0).unwrap();
    let x = input(&net, 2, 1);
    let state = net.input(&x).unwrap();
    let ys = sub.forward_capture(&state, &[]).unwrap();
    assert!(sub.grad_wrt_layer(&ys, "w2", &state).is_err());
}

#[test]
fn horizon_is_capped_by_remaining_targets() {
    let net = build(RESNET, 1);
    assert_eq!(net.k_max(1), 4);
    let x = input(&net, 2, 1);
    for (start, k) in [(1, 0), (1, 2), (1, 40), (4, 40), (8, 3)] {
        let sub = net.sub_network(start, k).unwrap();
        assert_eq!(sub.horizon(), k.min(net.k_max(start)));
        let state = state_at(&net, &x, start);
        assert_eq!(sub.forward_capture(&state, &[]).unwrap().len(), sub.horizon() + 1);
    }
}

#[test]
fn linear_capture_is_additive() {
    let m = Manifest::from_json(
        r#"{"input_shape": [1, 4, 4], "weights": {"a": [2, 1, 3, 3], "d": [8, 3]},
            "ops": [{"kind": "conv2d", "weight": "a", "padding": 1, "target": true},
                    {"kind": "avgpool", "kernel": 2, "stride": 2, "target": true},
                    {"kind": "flatten"},
                    {"kind": "dense", "weight": "d", "target": true}]}"#,
    )
    .unwrap();
    let net = build(&serde_json::to_string(&m).unwrap(), 3);
    let sub = net.sub_network(0, 2).unwrap();
    let a: Tensor = Rng::new(1).normal_tensor(&[2, 1, 4, 4], 1.0);
    let b: Tensor = Rng::new(2).normal_tensor(&[2, 1, 4, 4], 1.0);
    let ca = sub.forward_capture(&Activation::new(a.clone()), &[]).unwrap();
    let cb = sub.forward_capture(&Activation::new(b.clone()), &[]).unwrap();
    let cab = sub.forward_capture(&Activation::new(a.add(&b).unwrap()), &[]).unwrap();
    for k in 0..3 {
        let sum = ca[k].add(&cb[k]).unwrap();
        for (u, v) in sum.data().iter().zip(cab[k].data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn split_forward_matches_full_forward() {
    for (json, n) in [(RESNET, 9), (VIT, 9), (CNN, 8)] {
        let net = build(json, 2);
        let x = input(&net, 2, 4);
        let full = net.forward(&x).unwrap();
        for cut in 0..=n {
            let mid = state_at(&net, &x, cut);
            let (out, _) = net.forward_range(mid, cut, n, &[]).unwrap();
            assert_eq!(out.x, full);
        }
    }
}

#[test]
fn shape_errors_name_the_op() {
    let net = build(MLP, 1);
    let bad = Tensor::zeros(&[2, 4]);
    let err = net.forward(&bad).unwrap_err().to_string();
    assert!(err.contains("network input"), "{err}");
    let err = net
        .sub_network(2, 0)
        .unwrap()
        .forward_capture(&Activation::new(Tensor::zeros(&[2, 5])), &[])
        .unwrap_err()
        .to_string();
    assert!(err.contains("op 2 (dense)"), "{err}");
}

#[test]
fn exact_hvp_matches_gradient_differences() {
    let net = build(VIT, 12);
    let x = input(&net, 2, 5);
    let state = state_at(&net, &x, 1);
    let sub = net.sub_network(1, 2).unwrap();
    let ys = targets(&net, 1, 2, &state);
    let names = ["wq", "wk", "wv"];
    let mut rng = Rng::new(4);
    let dirs: Vec<Tensor> = names.iter().map(|_| rng.normal_tensor(&[4, 4], 1.0)).collect();
    let direction: Vec<(&str, &Tensor)> = names.iter().copied().zip(dirs.iter()).collect();
    let (loss, g, hv) = sub.hvp(&state, &ys, &[], &direction).unwrap();
    let (loss2, g2) = sub.loss_grad(&state, &ys, &[], &names).unwrap();
    assert!((loss - loss2).abs() < 1e-12 * loss.max(1.0));
    let h = 1e-5;
    let shifted = |sign: f64| {
        let ws: Vec<Tensor> = names
            .iter()
            .zip(&dirs)
            .map(|(n, d)| sub.weight(n).unwrap().add(&d.scale(sign * h)).unwrap())
            .collect();
        let point: Vec<(&str, &Tensor)> = names.iter().copied().zip(ws.iter()).collect();
        sub.loss_grad(&state, &ys, &point, &names).unwrap().1
    };
    let (gp, gm) = (shifted(1.0), shifted(-1.0));
    for n in names {
        assert_eq!(g[n], g2[n]);
        for i in 0..16 {
            let fd = (gp[n].data()[i] - gm[n].data()[i]) / (2.0 * h);
            let e = hv[n].data()[i];
            assert!((fd - e).abs() <= 1e-6 * fd.abs().max(1.0), "{n}[{i}]: {e} vs {fd}");
        }
    }
}
