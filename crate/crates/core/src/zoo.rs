//! Small reference networks and a plain SGD trainer for them.
//!
//! The builders return manifests whose conv and dense weights are all
//! prunable and whose activation outputs are flagged as targets. Channel
//! counts are multiples of 4 so every prunable weight admits 2:4 masks.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{Manifest, NetworkGraph, Op, OpSpec};
use crate::pipeline::data::Dataset;
use crate::pipeline::{accuracy, checkpoint};
use crate::recon::batch_partition;
use crate::tensor::{Rng, Tensor};

struct Builder {
    weights: BTreeMap<String, Vec<usize>>,
    prunable: Vec<String>,
    ops: Vec<OpSpec>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            weights: BTreeMap::new(),
            prunable: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn op(&mut self, op: Op, target: bool) -> &mut Self {
        self.ops.push(OpSpec { op, target });
        self
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> &mut Self {
        let w = format!("{name}.w");
        self.weights.insert(w.clone(), vec![d_in, d_out]);
        self.prunable.push(w.clone());
        let bias = bias.then(|| {
            let b = format!("{name}.b");
            self.weights.insert(b.clone(), vec![d_out]);
            b
        });
        self.op(Op::Dense { weight: w, bias }, true)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> &mut Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        self.weights.insert(w.clone(), vec![c_out, c_in, k, k]);
        self.weights.insert(b.clone(), vec![c_out]);
        self.prunable.push(w.clone());
        self.op(
            Op::Conv2d {
                weight: w,
                bias: Some(b),
                stride,
                padding,
            },
            true,
        )
    }

    fn bn(&mut self, name: &str, c: usize) -> &mut Self {
        let p = |s: &str| format!("{name}.{s}");
        for s in ["gamma", "beta", "mean", "var"] {
            self.weights.insert(p(s), vec![c]);
        }
        self.op(
            Op::BatchnormAffine {
                gamma: p("gamma"),
                beta: p("beta"),
                mean: p("mean"),
                var: p("var"),
                eps: 1e-5,
            },
            false,
        )
    }

    fn finish(&mut self, input_shape: Vec<usize>) -> Result<Manifest> {
        let m = Manifest {
            input_shape,
            weights: std::mem::take(&mut self.weights),
            prunable: std::mem::take(&mut self.prunable),
            ops: std::mem::take(&mut self.ops),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Dense layers with GeLU between them; `widths` includes input and output.
pub fn mlp(widths: &[usize]) -> Result<Manifest> {
    if widths.len() < 2 {
        return Err(Error::Config("an MLP needs at least input and output widths".into()));
    }
    let mut b = Builder::new();
    for (i, w) in widths.windows(2).enumerate() {
        b.dense(&format!("fc{i}"), w[0], w[1], true);
        if i + 2 < widths.len() {
            b.op(Op::Gelu, true);
        }
    }
    b.finish(vec![widths[0]])
}

/// Two 3×3 convolutions (the second with stride 2) and a dense classifier,
/// for `(c, h, w)` inputs with `h`, `w` even.
pub fn cnn(input: [usize; 3], width: usize, classes: usize) -> Result<Manifest> {
    let [c, h, w] = input;
    let mut b = Builder::new();
    b.conv("conv1", c, width, 3, 1, 1)
        .op(Op::Relu, true)
        .conv("conv2", width, 2 * width, 3, 2, 1)
        .op(Op::Relu, true)
        .op(Op::Flatten, false)
        .dense("fc", 2 * width * h.div_ceil(2) * w.div_ceil(2), classes, true);
    b.finish(input.to_vec())
}

/// A stem convolution, one basic residual block with frozen batch norm,
/// average pooling and a dense classifier.
pub fn resnet(input: [usize; 3], width: usize, classes: usize) -> Result<Manifest> {
    let [c, h, w] = input;
    let mut b = Builder::new();
    b.conv("stem", c, width, 3, 1, 1)
        .bn("stem.bn", width)
        .op(Op::Relu, true)
        .op(Op::ResidualBegin, false)
        .conv("block.conv1", width, width, 3, 1, 1)
        .bn("block.bn1", width)
        .op(Op::Relu, true)
        .conv("block.conv2", width, width, 3, 1, 1)
        .bn("block.bn2", width)
        .op(Op::ResidualAdd, false)
        .op(Op::Relu, true)
        .op(Op::Avgpool { kernel: 2, stride: 2 }, false)
        .op(Op::Flatten, false)
        .dense("fc", width * (h / 2) * (w / 2), classes, true);
    b.finish(input.to_vec())
}

/// He-normal weights, zero biases, identity batch norm.
pub fn init<T: crate::Scalar>(manifest: &Manifest, seed: u64) -> Result<NetworkGraph<T>> {
    let mut weights = BTreeMap::new();
    let mut rng = Rng::substream(seed, "init");
    for (i, spec) in manifest.ops.iter().enumerate() {
        let shape = |n: &str| manifest.weight_shape(n).map(<[usize]>::to_vec);
        match &spec.op {
            Op::BatchnormAffine {
                gamma, beta, mean, var, ..
            } => {
                let s = shape(gamma)?;
                weights.insert(gamma.clone(), Tensor::ones(&s));
                weights.insert(beta.clone(), Tensor::zeros(&s));
                weights.insert(mean.clone(), Tensor::zeros(&s));
                weights.insert(var.clone(), Tensor::ones(&s));
            }
            op => {
                for name in op.weight_names() {
                    let s = shape(name)?;
                    let t = if op.prunable_slots().contains(&name) {
                        let fan_in: usize = match op {
                            Op::Conv2d { .. } => s[1..].iter().product(),
                            _ => s[0],
                        };
                        rng.normal_tensor(&s, (2.0 / fan_in as f64).sqrt())
                    } else {
                        Tensor::zeros(&s)
                    };
                    weights.insert(name.to_string(), t);
                }
            }
        }
        log::trace!("initialized op {i}");
    }
    NetworkGraph::new(manifest.clone(), weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mean softmax cross-entropy of `logits` `(b, C)` and its gradient.
pub fn cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Tensor<f64>)> {
    let c = logits.row_len();
    let b = labels.len();
    if logits.numel() != b * c {
        return Err(Error::shape("cross-entropy logits", logits.shape(), &[b, c]));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(c).zip(labels).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        loss += z.ln() + mx - row[y];
        for j in 0..c {
            grad[i * c + j] = ((row[j] - mx).exp() / z - (j == y) as u8 as f64) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

const TRAIN_CHUNK: usize = 16;

/// Mini-batch SGD with momentum on the cross-entropy of all weights except
/// frozen batch-norm statistics.
pub fn train(graph: &mut NetworkGraph<f64>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    let trainable: Vec<String> = graph
        .manifest()
        .ops
        .iter()
        .flat_map(|s| s.op.differentiable_slots().into_iter().map(str::to_string))
        .collect();
    let names: Vec<&str> = trainable.iter().map(String::as_str).collect();
    let mut velocity: BTreeMap<String, Tensor<f64>> = trainable
        .iter()
        .map(|n| Ok((n.clone(), Tensor::zeros(graph.weight(n)?.shape()))))
        .collect::<Result<_>>()?;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for rows in batch_partition(data.len(), cfg.batch_size, cfg.seed, epoch)? {
            let b = rows.len();
            let parts = rows
                .par_chunks(TRAIN_CHUNK)
                .map(|chunk| {
                    let x = data.x.select_rows(chunk)?;
                    let y: Vec<usize> = chunk.iter().map(|&r| data.labels[r]).collect();
                    graph.backprop(&x, &names, |out| {
                        let (l, g) = cross_entropy(out, &y)?;
                        let scale = chunk.len() as f64 / b as f64;
                        Ok((l * scale, g.scale(scale)))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
            for (l, g) in parts {
                total += l * b as f64;
                for (name, t) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t)?,
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            for name in &trainable {
                let Some(g) = grads.get(name) else { continue };
                let v = velocity.get_mut(name).unwrap();
                *v = v.scale(cfg.momentum).add(g)?;
                let w = graph.weight(name)?.sub(&v.scale(cfg.lr))?;
                graph.replace_weight(name, w)?;
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged in epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    Ok(TrainReport {
        epoch_loss,
        train_accuracy: accuracy(graph, data)?,
    })
}

/// Writes `manifest.json` and `dense.snws` for `graph` into `dir`.
pub fn export(graph: &NetworkGraph<f64>, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save_manifest(&dir.join("manifest.json"), graph.manifest())?;
    checkpoint::save(&dir.join("dense.snws"), graph, &BTreeMap::new())
}
