#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use snows::hvp::ActiveSet;
use snows::masks::Mask;
use snows::netgraph::{Activation, Manifest, NetworkGraph, Op};
use snows::recon::ReconstructionTask;
use snows::{Rng, Tensor};

pub fn graph(json: &str, seed: u64, std: f64) -> NetworkGraph {
    let manifest = Manifest::from_json(json).unwrap();
    let mut rng = Rng::new(seed);
    let mut weights = BTreeMap::new();
    for (name, shape) in &manifest.weights {
        weights.insert(name.clone(), rng.normal_tensor(shape, std));
    }
    for spec in &manifest.ops {
        if let Op::BatchnormAffine { var, .. } = &spec.op {
            let v = weights[var].map(|x: f64| x.abs() + 0.5);
            weights.insert(var.clone(), v);
        }
    }
    NetworkGraph::new(manifest, weights).unwrap()
}

pub fn batch(net: &NetworkGraph, n: usize, seed: u64) -> Tensor {
    let mut shape = vec![n];
    shape.extend(&net.manifest().input_shape);
    Rng::new(seed).normal_tensor(&shape, 1.0)
}

pub fn state_at(net: &NetworkGraph, x: &Tensor, start: usize) -> Activation {
    net.forward_range(net.input(x).unwrap(), 0, start, &[]).unwrap().0
}

/// Dense targets at op `start` with the named weights masked.
pub fn task(net: &NetworkGraph, start: usize, k: usize, names: &[&str], masks: Vec<Mask>, x: &Tensor) -> ReconstructionTask {
    let sub = Arc::new(net.sub_network(start, k).unwrap());
    let active = Arc::new(ActiveSet::new(names.iter().map(|s| s.to_string()).collect(), masks).unwrap());
    ReconstructionTask::capture(sub, active, state_at(net, x, start)).unwrap()
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub const DENSE1: &str = r#"{
    "input_shape": [8],
    "weights": {"w": [8, 3]},
    "prunable": ["w"],
    "ops": [{"kind": "dense", "weight": "w", "target": true}]
}"#;

pub const MLP: &str = r#"{
    "input_shape": [8],
    "weights": {"w1": [8, 6], "b1": [6], "w2": [6, 4], "b2": [4], "w3": [4, 3]},
    "prunable": ["w1", "w2", "w3"],
    "ops": [
        {"kind": "dense", "weight": "w1", "bias": "b1", "target": true},
        {"kind": "gelu", "target": true},
        {"kind": "dense", "weight": "w2", "bias": "b2", "target": true},
        {"kind": "gelu", "target": true},
        {"kind": "dense", "weight": "w3", "target": true}
    ]
}"#;

pub const CONV: &str = r#"{
    "input_shape": [4, 5, 5],
    "weights": {"c": [3, 4, 3, 3], "cb": [3], "d": [27, 2]},
    "prunable": ["c", "d"],
    "ops": [
        {"kind": "conv2d", "weight": "c", "bias": "cb", "stride": 2, "padding": 1, "target": true},
        {"kind": "gelu", "target": true},
        {"kind": "flatten"},
        {"kind": "dense", "weight": "d", "target": true}
    ]
}"#;

/// Inputs driven by a few latent factors plus small noise, so pruned weights
/// can be compensated by their neighbours.
pub fn correlated_batch(net: &NetworkGraph, n: usize, factors: usize, seed: u64) -> Tensor {
    let mut shape = vec![n];
    shape.extend(&net.manifest().input_shape);
    let d: usize = net.manifest().input_shape.iter().product();
    let mut rng = Rng::new(seed);
    let z: Tensor = rng.normal_tensor(&[n, factors], 1.0);
    let a: Tensor = rng.normal_tensor(&[factors, d], 1.0);
    let noise: Tensor = rng.normal_tensor(&[n, d], 0.05);
    z.matmul(&a).unwrap().add(&noise).unwrap().reshape(&shape).unwrap()
}
