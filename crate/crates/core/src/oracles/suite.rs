//! Pass/fail checks of the solver against the reference implementations,
//! each reported as a measured error next to its tolerance.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::hessian::{fd_hessian, DEFAULT_CAP};
use super::linalg::{add_diag, lu_solve, matvec};
use super::lsq::closed_form_k0;
use super::toy::toy_quadratic;
use crate::error::{Error, Result};
use crate::hvp::{cg_solve, hvp, ActiveSet, CgConfig, HvpMode, Objective};
use crate::masks::{nm_groups, Mask};
use crate::netgraph::{Manifest, NetworkGraph, Op};
use crate::newton::{optimize, optimize_layer, NewtonConfig, StepStatus};
use crate::recon::ReconstructionTask;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Hvp,
    Cg,
    K0,
    ToyQuadratic,
    Gradients,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::ToyQuadratic,
        Suite::Hvp,
        Suite::Cg,
        Suite::K0,
        Suite::Gradients,
        Suite::Invariants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Hvp => "hvp",
            Suite::Cg => "cg",
            Suite::K0 => "k0",
            Suite::ToyQuadratic => "toy-quadratic",
            Suite::Gradients => "gradients",
            Suite::Invariants => "invariants",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown oracle suite `{s}`")))
    }
}

/// One measured quantity; it passes when `measured ≤ tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Hvp => hvp_suite(),
        Suite::Cg => cg_suite(),
        Suite::K0 => k0_suite(),
        Suite::ToyQuadratic => toy_suite(),
        Suite::Gradients => gradient_suite(),
        Suite::Invariants => invariant_suite(),
    }
}

pub fn run_all() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run(s)?);
    }
    Ok(out)
}

/// Fixed-width text table, one row per check.
pub fn render_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<width$} {:>12} {:>12}  result", "suite", "check", "measured", "tolerance");
    for c in checks {
        let _ = writeln!(
            s,
            "{:<14} {:<width$} {:>12.3e} {:>12.3e}  {}",
            c.suite.name(),
            c.name,
            c.measured,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

// ---- fixtures ----

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

fn is_variance(m: &Manifest, name: &str) -> bool {
    m.ops
        .iter()
        .any(|s| matches!(&s.op, Op::BatchnormAffine { var, .. } if var == name))
}

/// Gaussian weights with positive batch-norm variances.
fn fixture(json: &str, seed: u64) -> Result<NetworkGraph> {
    let manifest = Manifest::from_json(json)?;
    let mut rng = Rng::new(seed);
    let mut weights = BTreeMap::new();
    for (name, shape) in &manifest.weights {
        let mut w: Tensor = rng.normal_tensor(shape, 0.5);
        if is_variance(&manifest, name) {
            w = w.map(|v| v.abs() + 0.5);
        }
        weights.insert(name.clone(), w);
    }
    NetworkGraph::new(manifest, weights)
}

fn inputs(net: &NetworkGraph, n: usize, seed: u64) -> Tensor {
    let mut shape = vec![n];
    shape.extend(&net.manifest().input_shape);
    Rng::new(seed).normal_tensor(&shape, 1.0)
}

fn perturbed(net: &NetworkGraph, seed: u64) -> Result<NetworkGraph> {
    let mut other = net.clone();
    let mut rng = Rng::new(seed);
    let names: Vec<String> = net.weights().keys().cloned().collect();
    for name in names {
        let w = net.weight(&name)?;
        let mut v = w.add(&rng.normal_tensor(w.shape(), 0.1))?;
        if is_variance(net.manifest(), &name) {
            v = v.map(|x| x.abs() + 0.5);
        }
        other.replace_weight(&name, v)?;
    }
    Ok(other)
}

/// Task at op `start` whose targets come from a perturbed copy of `net`,
/// so the loss is away from its minimum.
fn fixture_task(
    net: &NetworkGraph,
    start: usize,
    k: usize,
    names: &[&str],
    masks: Vec<Mask>,
    x: &Tensor,
) -> Result<ReconstructionTask> {
    let (state, _) = net.forward_range(net.input(x)?, 0, start, &[])?;
    let sub = Arc::new(net.sub_network(start, k)?);
    let targets = perturbed(net, 99)?.sub_network(start, k)?.forward_capture(&state, &[])?;
    let active = Arc::new(ActiveSet::new(names.iter().map(|s| s.to_string()).collect(), masks)?);
    ReconstructionTask::new(sub, active, state, targets)
}

fn random_masks(net: &NetworkGraph, names: &[&str], sparsity: f64, rng: &mut Rng) -> Result<Vec<Mask>> {
    names
        .iter()
        .map(|n| {
            // magnitude of a random tensor gives a random pattern
            let shape = net.weight(n)?.shape().to_vec();
            Mask::magnitude_unstructured(&rng.normal_tensor::<f64>(&shape, 1.0), sparsity)
        })
        .collect()
}

// ---- suites ----

/// (manifest, start, K, weights, sparsity), each with at most 50 active
/// coordinates.
const HVP_CASES: [(&str, &str, usize, usize, &[&str], f64); 5] = [
    ("mlp", MLP, 0, 3, &["w1"], 0.2),
    ("mlp", MLP, 2, 1, &["w2"], 0.0),
    ("cnn", CNN, 4, 1, &["c2"], 0.0),
    ("resnet", RESNET, 1, 4, &["c1"], 0.0),
    ("vit", VIT, 1, 4, &["wq", "wk", "wv"], 0.5),
];

fn hvp_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut worst_exact: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut count = 0;
    for (i, (label, json, start, k, names, s)) in HVP_CASES.iter().enumerate() {
        for rep in 0..4u64 {
            let seed = 100 + 10 * i as u64 + rep;
            let net = fixture(json, seed)?;
            let mut rng = Rng::new(seed);
            let masks = random_masks(&net, names, *s, &mut rng)?;
            let t = fixture_task(&net, *start, *k, names, masks, &inputs(&net, 3, seed))?;
            let x0 = t.initial_point()?;
            let h = fd_hessian(&t, &x0, 1e-4, DEFAULT_CAP)?;
            let g = t.loss_grad(&x0)?.1;
            let v: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
            let want = matvec(&h, &v);
            let exact = hvp(&t, &x0, &v, &g, HvpMode::Exact)?;
            let fd = hvp(&t, &x0, &v, &g, HvpMode::FiniteDiff { eps0: 1e-7 })?;
            let (e, f) = (rel(&exact, &want), rel(&fd, &want));
            checks.push(Check::new(Suite::Hvp, format!("{label}/{}#{rep} exact (m={})", names.join("+"), x0.len()), e, 1e-6));
            worst_exact = worst_exact.max(e);
            worst_fd = worst_fd.max(f);
            count += 1;
        }
    }
    checks.push(Check::new(Suite::Hvp, format!("max exact over {count} tasks"), worst_exact, 1e-6));
    checks.push(Check::new(Suite::Hvp, format!("max fd over {count} tasks"), worst_fd, 1e-4));
    Ok(checks)
}

fn cg_suite() -> Result<Vec<Check>> {
    let mut rng = Rng::substream(0, "oracle/cg");
    let mut worst: f64 = 0.0;
    let sizes = [2, 5, 10, 20, 40, 60, 80, 100, 120, 140, 160, 180, 200];
    let mut count = 0;
    let mut checks = Vec::new();
    for rep in 0..2 {
        for &m in &sizes {
            // BᵀB/m with B tall is well conditioned
            let b: Tensor = rng.normal_tensor(&[2 * m, m], 1.0);
            let a = b.matmul_tn(&b)?.scale(1.0 / m as f64);
            let lambda = [1e-4, 1e-2][rep];
            let g: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let damped = add_diag(&a, lambda);
            let minus_g: Vec<f64> = g.iter().map(|v| -v).collect();
            let want = lu_solve(&damped, &minus_g)?;
            let cfg = CgConfig {
                tol: 1e-10,
                lambda,
                max_iters: 10 * m,
                ..CgConfig::default()
            };
            let got = cg_solve(|v| Ok(matvec(&a, v)), &g, &cfg)?;
            let e = rel(&got.delta, &want);
            worst = worst.max(e);
            count += 1;
            if m == 200 {
                checks.push(Check::new(Suite::Cg, format!("m=200 lambda={lambda:e}"), e, 1e-6));
            }
        }
    }
    checks.push(Check::new(Suite::Cg, format!("max over {count} systems"), worst, 1e-6));
    Ok(checks)
}

fn k0_suite() -> Result<Vec<Check>> {
    const DENSE: &str = r#"{"input_shape": [8], "weights": {"w": [8, 3]}, "prunable": ["w"],
        "ops": [{"kind": "dense", "weight": "w", "target": true}]}"#;
    const CONV: &str = r#"{"input_shape": [4, 5, 5], "weights": {"c": [3, 4, 3, 3]}, "prunable": ["c"],
        "ops": [{"kind": "conv2d", "weight": "c", "padding": 1, "target": true}]}"#;
    let lambda = 1e-8;
    let mut checks = Vec::new();
    for (label, json, name) in [("dense", DENSE, "w"), ("conv", CONV, "c")] {
        for (kind, nm) in [("unstructured:0.5", false), ("nm:2:4", true)] {
            let net = fixture(json, 7)?;
            let w = net.weight(name)?;
            let mask = if nm { Mask::magnitude_nm(w, 2, 4)? } else { Mask::magnitude_unstructured(w, 0.5)? };
            let x = inputs(&net, 16, 8);
            let t = fixture_task(&net, 0, 0, &[name], vec![mask], &x)?;
            let cfg = NewtonConfig {
                batch_size: t.samples(),
                cg: CgConfig {
                    lambda,
                    tol: 1e-10,
                    max_iters: 10_000,
                    ..CgConfig::default()
                },
                ..NewtonConfig::default()
            };
            let (got, _) = optimize_layer(&t, &cfg, 0, name)?;
            let init = t.weights_at(&t.initial_point()?)?.remove(0);
            let want = closed_form_k0(&t, lambda, Some(&init))?;
            checks.push(Check::new(
                Suite::K0,
                format!("{label} {kind} one step vs normal equations"),
                rel(got[0].data(), want.data()),
                1e-6,
            ));
        }
    }
    Ok(checks)
}

fn toy_suite() -> Result<Vec<Check>> {
    let r = toy_quadratic(1.0, 100.0, [1.0, 1.0], 0.01, 1e-6)?;
    let iters = |v: Option<usize>| v.map_or(f64::INFINITY, |n| (n as f64 - 1375.0).abs());
    let w = r.newton_after_one_step;
    Ok(vec![
        Check::new(Suite::ToyQuadratic, "sgd iterations (closed form) vs 1375", iters(r.sgd_iters_closed_form), 0.0),
        Check::new(Suite::ToyQuadratic, "sgd iterations (numeric) vs 1375", iters(r.sgd_iters_numeric), 1.0),
        Check::new(Suite::ToyQuadratic, "newton steps vs 1", (r.newton_steps as f64 - 1.0).abs(), 0.0),
        Check::new(Suite::ToyQuadratic, "|w| after one newton step", w[0].hypot(w[1]), 1e-12),
    ])
}

/// One small graph per op kind; with `K = 1` the window reaches the last
/// op, the only flagged one.
fn kind_fixtures() -> Vec<(&'static str, &'static str)> {
    vec![
        ("dense", r#"{"input_shape": [4], "weights": {"w": [4, 3], "b": [3]},
            "ops": [{"kind": "dense", "weight": "w", "bias": "b", "target": true}]}"#),
        ("conv2d", r#"{"input_shape": [2, 5, 5], "weights": {"w": [3, 2, 3, 3], "b": [3]},
            "ops": [{"kind": "conv2d", "weight": "w", "bias": "b", "stride": 2, "padding": 1, "target": true}]}"#),
        ("relu", r#"{"input_shape": [4], "weights": {"w": [4, 5]},
            "ops": [{"kind": "dense", "weight": "w"}, {"kind": "relu", "target": true}]}"#),
        ("gelu", r#"{"input_shape": [4], "weights": {"w": [4, 5]},
            "ops": [{"kind": "dense", "weight": "w"}, {"kind": "gelu", "target": true}]}"#),
        ("softmax", r#"{"input_shape": [4], "weights": {"w": [4, 5]},
            "ops": [{"kind": "dense", "weight": "w"}, {"kind": "softmax", "target": true}]}"#),
        ("batchnorm_affine", r#"{"input_shape": [2, 3, 3],
            "weights": {"w": [3, 2, 3, 3], "g": [3], "b": [3], "m": [3], "v": [3]},
            "ops": [{"kind": "conv2d", "weight": "w", "padding": 1},
                    {"kind": "batchnorm_affine", "gamma": "g", "beta": "b", "mean": "m", "var": "v", "target": true}]}"#),
        ("residual_begin/residual_add", r#"{"input_shape": [4], "weights": {"w": [4, 4]},
            "ops": [{"kind": "residual_begin"}, {"kind": "dense", "weight": "w"}, {"kind": "gelu"},
                    {"kind": "residual_add", "target": true}]}"#),
        ("avgpool", r#"{"input_shape": [2, 4, 4], "weights": {"w": [2, 2, 3, 3]},
            "ops": [{"kind": "conv2d", "weight": "w", "padding": 1}, {"kind": "avgpool", "kernel": 2, "stride": 2, "target": true}]}"#),
        ("maxpool", r#"{"input_shape": [2, 4, 4], "weights": {"w": [2, 2, 3, 3]},
            "ops": [{"kind": "conv2d", "weight": "w", "padding": 1}, {"kind": "maxpool", "kernel": 2, "stride": 2, "target": true}]}"#),
        ("flatten", r#"{"input_shape": [2, 3, 3], "weights": {"w": [2, 2, 3, 3], "f": [18, 3]},
            "ops": [{"kind": "conv2d", "weight": "w", "padding": 1}, {"kind": "flatten"},
                    {"kind": "dense", "weight": "f", "target": true}]}"#),
        ("attention_qkv", r#"{"input_shape": [3, 4], "weights": {"q": [4, 4], "k": [4, 4], "v": [4, 4]},
            "ops": [{"kind": "attention_qkv", "wq": "q", "wk": "k", "wv": "v", "heads": 2, "head_dim": 2, "target": true}]}"#),
        ("attention_out", r#"{"input_shape": [3, 4], "weights": {"q": [4, 4], "k": [4, 4], "v": [4, 4], "o": [4, 4], "ob": [4]},
            "ops": [{"kind": "attention_qkv", "wq": "q", "wk": "k", "wv": "v", "heads": 2, "head_dim": 2},
                    {"kind": "attention_out", "weight": "o", "bias": "ob", "target": true}]}"#),
    ]
}

/// Largest `|g − fd| / max(|g|, |fd|, 1)` over every differentiable
/// weight, with central differences at step `1e-5`.
fn gradient_error(net: &NetworkGraph, k: usize, x: &Tensor) -> Result<f64> {
    let (state, _) = net.forward_range(net.input(x)?, 0, 0, &[])?;
    let sub = net.sub_network(0, k)?;
    let ys = perturbed(net, 99)?.sub_network(0, k)?.forward_capture(&state, &[])?;
    let mut names: Vec<&str> = Vec::new();
    for spec in sub.ops() {
        names.extend(spec.op.differentiable_slots());
    }
    let (_, grads) = sub.loss_grad(&state, &ys, &[], &names)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for name in &names {
        let g = &grads[*name];
        let w0 = sub.weight(name)?;
        for i in 0..w0.numel() {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let mut wm = w0.clone();
            wm.data_mut()[i] -= h;
            let fd = (sub.loss(&state, &ys, &[(name, &wp)])? - sub.loss(&state, &ys, &[(name, &wm)])?) / (2.0 * h);
            let gi = g.data()[i];
            worst = worst.max((gi - fd).abs() / fd.abs().max(gi.abs()).max(1.0));
        }
    }
    Ok(worst)
}

fn gradient_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (i, (kind, json)) in kind_fixtures().into_iter().enumerate() {
        let net = fixture(json, 40 + i as u64)?;
        let x = inputs(&net, 3, 7);
        checks.push(Check::new(Suite::Gradients, kind.to_string(), gradient_error(&net, 1, &x)?, 1e-6));
    }
    for (label, json, k) in [("mlp K=3", MLP, 3), ("cnn K=3", CNN, 3), ("resnet K=4", RESNET, 4), ("vit K=4", VIT, 4)] {
        let net = fixture(json, 5)?;
        let x = inputs(&net, 3, 7);
        checks.push(Check::new(Suite::Gradients, label, gradient_error(&net, k, &x)?, 1e-6));
    }
    Ok(checks)
}

fn invariant_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let c = |name: &str, measured: f64, tol: f64| Check::new(Suite::Invariants, name, measured, tol);

    // N:M group exactness on dense and conv shapes
    let mut rng = Rng::substream(0, "oracle/invariants");
    let mut bad_groups = 0usize;
    for shape in [vec![8, 5], vec![16, 3], vec![3, 8, 3, 3], vec![2, 4, 1, 1]] {
        let w: Tensor = rng.normal_tensor(&shape, 1.0);
        for (n, m) in [(1, 2), (2, 4), (1, 4), (3, 4)] {
            let mask = Mask::magnitude_nm(&w, n, m)?;
            for g in nm_groups(&shape, m)? {
                if g.iter().filter(|&&i| mask.pattern()[i]).count() != n {
                    bad_groups += 1;
                }
            }
        }
    }
    checks.push(c("N:M groups with the wrong count", bad_groups as f64, 0.0));

    // the MLP fixture, 2:4 on w2 (d_in 6 is not divisible by 4, so 1:2)
    let net = fixture(MLP, 3)?;
    let x = inputs(&net, 24, 4);
    let mask = Mask::magnitude_nm(net.weight("w2")?, 1, 2)?;
    let t = fixture_task(&net, 2, 1, &["w2"], vec![mask.clone()], &x)?;
    let x0 = t.initial_point()?;

    let (_, g) = t.loss_grad(&x0)?;
    let full_g = t.weights_at(&g)?.remove(0);
    let leak = masked_max(&full_g, &mask);
    checks.push(c("gradient at masked coordinates", leak, 0.0));

    let mut hv_leak: f64 = 0.0;
    for _ in 0..4 {
        let v: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
        let hv = t.weights_at(&t.hvp_exact(&x0, &v)?)?.remove(0);
        hv_leak = hv_leak.max(masked_max(&hv, &mask));
    }
    checks.push(c("Hessian products at masked coordinates", hv_leak, 0.0));

    // the masked system is the full Hessian restricted to the active set
    let full_t = fixture_task(&net, 2, 1, &["w2"], vec![Mask::ones(mask.shape())], &x)?;
    let xf = full_t.active().gather(&t.weights_at(&x0)?)?;
    let act = mask.active();
    let n = mask.numel();
    let mut restrict: f64 = 0.0;
    let mut e = vec![0.0; act.len()];
    for (q, &j) in act.iter().enumerate() {
        e[q] = 1.0;
        let col = t.hvp_exact(&x0, &e)?;
        e[q] = 0.0;
        let mut ef = vec![0.0; n];
        ef[j] = 1.0;
        let full_col = full_t.hvp_exact(&xf, &ef)?;
        for (p, &i) in act.iter().enumerate() {
            restrict = restrict.max((col[p] - full_col[i]).abs() / full_col[i].abs().max(1.0));
        }
    }
    checks.push(c("active Hessian vs restricted full Hessian", restrict, 1e-10));

    // Armijo sufficient decrease and mask persistence on every accepted step
    let cfg = NewtonConfig {
        batch_size: 8,
        max_epochs: 2,
        ..NewtonConfig::default()
    };
    let out = optimize(&t, x0.clone(), &cfg, 5, "w2")?;
    let mut armijo: f64 = 0.0;
    let mut accepted = 0;
    for row in &out.trajectory {
        let s = &row.step;
        if s.status == StepStatus::Accepted {
            accepted += 1;
            let bound = s.loss_pre - s.alpha * cfg.armijo_beta * s.slope.abs();
            armijo = armijo.max(s.loss_post - bound);
        }
    }
    checks.push(c(&format!("Armijo excess over {accepted} accepted steps"), armijo.max(0.0), 0.0));
    let w_final = t.weights_at(&out.x)?.remove(0);
    checks.push(c("pruned weights after Newton at masked coordinates", masked_max(&w_final, &mask), 0.0));

    // softmax rows under pruned attention weights
    let vit = fixture(VIT, 9)?;
    let mut pruned = vit.clone();
    for w in ["wq", "wk", "wv"] {
        let m = Mask::magnitude_nm(vit.weight(w)?, 2, 4)?;
        pruned.replace_weight(w, m.apply(vit.weight(w)?)?)?;
    }
    let xa = inputs(&vit, 16, 10);
    let mut worst: f64 = 0.0;
    for g in [&vit, &pruned] {
        let p = g.attention_probs(&xa, 1)?;
        for row in p.data().chunks(3) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let y = net.forward(&x)?;
    for row in y.data().chunks(4) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    checks.push(c("softmax row sums minus one", worst, 1e-6));
    Ok(checks)
}

fn masked_max(w: &Tensor, mask: &Mask) -> f64 {
    w.data()
        .iter()
        .zip(mask.pattern())
        .filter(|(_, &k)| !k)
        .fold(0.0, |m, (v, _)| m.max(v.abs()))
}
