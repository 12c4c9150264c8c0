//! The network manifest: an ordered op list plus declared weight shapes.
//!
//! JSON layout (all field names normative):
//!
//! ```json
//! {
//!   "input_shape": [4, 8, 8],
//!   "weights": { "c1.w": [8, 4, 3, 3], "c1.b": [8] },
//!   "prunable": ["c1.w"],
//!   "ops": [
//!     { "kind": "conv2d", "weight": "c1.w", "bias": "c1.b", "stride": 1, "padding": 1, "target": true },
//!     { "kind": "relu", "target": true }
//!   ]
//! }
//! ```
//!
//! `input_shape` excludes the sample axis. Every op carries `kind` and an
//! optional `target` flag (default `false`); the remaining fields depend on
//! the kind, see [`Op`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::numel;

fn one() -> usize {
    1
}

fn bn_eps() -> f64 {
    1e-5
}

/// Operation kinds and their parameters.
///
/// Weight layouts: `dense`/`attention_out` weights are `(d_in, d_out)`,
/// `conv2d` weights `(d_out, d_in, k_h, k_w)`, and each attention
/// projection `(d, heads·head_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Dense {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Conv2d {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Gelu,
    /// Inference-mode batch norm over axis 1, from stored running statistics.
    BatchnormAffine {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        #[serde(default = "bn_eps")]
        eps: f64,
    },
    ResidualBegin,
    ResidualAdd,
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Softmax over the last axis.
    Softmax,
    /// Multi-head self-attention core: `concat_h softmax(Q_h K_hᵀ/√d_H) V_h`.
    AttentionQkv {
        wq: String,
        wk: String,
        wv: String,
        heads: usize,
        head_dim: usize,
    },
    AttentionOut {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::BatchnormAffine { .. } => "batchnorm_affine",
            Op::ResidualBegin => "residual_begin",
            Op::ResidualAdd => "residual_add",
            Op::Avgpool { .. } => "avgpool",
            Op::Maxpool { .. } => "maxpool",
            Op::Flatten => "flatten",
            Op::Softmax => "softmax",
            Op::AttentionQkv { .. } => "attention_qkv",
            Op::AttentionOut { .. } => "attention_out",
        }
    }

    /// All weight tensors the op reads.
    pub fn weight_names(&self) -> Vec<&str> {
        match self {
            Op::Dense { weight, bias }
            | Op::Conv2d { weight, bias, .. }
            | Op::AttentionOut { weight, bias } => {
                let mut v = vec![weight.as_str()];
                v.extend(bias.as_deref());
                v
            }
            Op::BatchnormAffine {
                gamma,
                beta,
                mean,
                var,
                ..
            } => vec![gamma, beta, mean, var],
            Op::AttentionQkv { wq, wk, wv, .. } => vec![wq, wk, wv],
            _ => Vec::new(),
        }
    }

    /// Weights that may be pruned: matrices and kernels, never biases or
    /// normalization parameters.
    pub fn prunable_slots(&self) -> Vec<&str> {
        match self {
            Op::Dense { weight, .. } | Op::Conv2d { weight, .. } | Op::AttentionOut { weight, .. } => {
                vec![weight.as_str()]
            }
            Op::AttentionQkv { wq, wk, wv, .. } => vec![wq, wk, wv],
            _ => Vec::new(),
        }
    }

    /// Weights whose gradient the reverse sweep can produce.
    pub fn differentiable_slots(&self) -> Vec<&str> {
        match self {
            Op::BatchnormAffine { .. } => Vec::new(),
            other => other.weight_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    #[serde(flatten)]
    pub op: Op,
    /// Marks this op's output as a reconstruction target.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub target: bool,
}

impl OpSpec {
    pub fn new(op: Op) -> Self {
        OpSpec { op, target: false }
    }

    pub fn target(op: Op) -> Self {
        OpSpec { op, target: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_shape: Vec<usize>,
    pub weights: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub prunable: Vec<String>,
    pub ops: Vec<OpSpec>,
}

fn op_err(index: usize, op: &Op, message: impl Into<String>) -> Error {
    Error::Op {
        index,
        kind: op.kind(),
        message: message.into(),
    }
}

/// For each `residual_add` in `ops`, the index of its matching
/// `residual_begin` within `ops`, or `None` when the begin precedes the
/// slice. Fails on an unmatched begin only when `closed` is set.
pub(crate) fn residual_pairs(ops: &[OpSpec], base: usize, closed: bool) -> Result<Vec<Option<usize>>> {
    let mut open = Vec::new();
    let mut pairs = vec![None; ops.len()];
    for (i, spec) in ops.iter().enumerate() {
        match spec.op {
            Op::ResidualBegin => open.push(i),
            Op::ResidualAdd => match open.pop() {
                Some(b) => pairs[i] = Some(b),
                None if !closed => {}
                None => {
                    return Err(op_err(
                        base + i,
                        &spec.op,
                        "residual_add without a preceding residual_begin",
                    ))
                }
            },
            _ => {}
        }
    }
    if closed {
        if let Some(&b) = open.last() {
            return Err(op_err(base + b, &ops[b].op, "residual_begin is never closed"));
        }
    }
    Ok(pairs)
}

fn pooled(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel >= 1 && stride >= 1 && len >= kernel).then(|| (len - kernel) / stride + 1)
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn weight_shape(&self, name: &str) -> Result<&[usize]> {
        self.weights
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Manifest(format!("weight `{name}` is not declared")))
    }

    /// Index of the op that owns (reads) `name`.
    pub fn owner_of(&self, name: &str) -> Option<usize> {
        self.ops
            .iter()
            .position(|s| s.op.weight_names().contains(&name))
    }

    /// Structural validation plus the symbolic shape pass.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Manifest(format!(
                "input_shape {:?} must be non-empty with positive dimensions",
                self.input_shape
            )));
        }
        for (name, shape) in &self.weights {
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::Manifest(format!("weight `{name}` has invalid shape {shape:?}")));
            }
        }
        let mut owners: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, spec) in self.ops.iter().enumerate() {
            for w in spec.op.weight_names() {
                if !self.weights.contains_key(w) {
                    return Err(op_err(i, &spec.op, format!("weight `{w}` is not declared")));
                }
                if let Some(prev) = owners.insert(w, i) {
                    return Err(op_err(
                        i,
                        &spec.op,
                        format!("weight `{w}` is already used by op {prev}"),
                    ));
                }
            }
        }
        for p in &self.prunable {
            let Some(&i) = owners.get(p.as_str()) else {
                return Err(Error::Manifest(format!("prunable weight `{p}` is not used by any op")));
            };
            if !self.ops[i].op.prunable_slots().contains(&p.as_str()) {
                return Err(Error::Manifest(format!(
                    "weight `{p}` of op {i} ({}) cannot be pruned",
                    self.ops[i].op.kind()
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.prunable {
            if !seen.insert(p) {
                return Err(Error::Manifest(format!("prunable weight `{p}` listed twice")));
            }
        }
        residual_pairs(&self.ops, 0, true)?;
        self.infer_shapes()?;
        Ok(())
    }

    /// Per-sample output shape of every op.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut stack: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.ops.len());
        for (i, spec) in self.ops.iter().enumerate() {
            cur = self.op_shape(i, &spec.op, cur, &mut stack)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn op_shape(
        &self,
        i: usize,
        op: &Op,
        x: Vec<usize>,
        stack: &mut Vec<Vec<usize>>,
    ) -> Result<Vec<usize>> {
        let err = |m: String| op_err(i, op, m);
        let w = |name: &str| self.weight_shape(name).map(|s| s.to_vec());
        let check_bias = |bias: &Option<String>, len: usize| -> Result<()> {
            if let Some(b) = bias {
                let s = w(b)?;
                if s != [len] {
                    return Err(op_err(i, op, format!("bias `{b}` has shape {s:?}, expected [{len}]")));
                }
            }
            Ok(())
        };
        match op {
            Op::Dense { weight, bias } | Op::AttentionOut { weight, bias } => {
                let ws = w(weight)?;
                if ws.len() != 2 {
                    return Err(err(format!("weight `{weight}` must be (d_in, d_out), got {ws:?}")));
                }
                if x.last() != Some(&ws[0]) {
                    return Err(err(format!("input {x:?} does not end with d_in = {}", ws[0])));
                }
                check_bias(bias, ws[1])?;
                let mut y = x;
                *y.last_mut().unwrap() = ws[1];
                Ok(y)
            }
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let ws = w(weight)?;
                if ws.len() != 4 {
                    return Err(err(format!(
                        "weight `{weight}` must be (d_out, d_in, k_h, k_w), got {ws:?}"
                    )));
                }
                if x.len() != 3 || x[0] != ws[1] {
                    return Err(err(format!("input {x:?} is not (d_in = {}, h, w)", ws[1])));
                }
                if *stride == 0 {
                    return Err(err("stride must be positive".into()));
                }
                let oh = pooled(x[1] + 2 * padding, ws[2], *stride);
                let ow = pooled(x[2] + 2 * padding, ws[3], *stride);
                check_bias(bias, ws[0])?;
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![ws[0], oh, ow]),
                    _ => Err(err(format!("kernel {:?} larger than padded input {x:?}", &ws[2..]))),
                }
            }
            Op::Relu | Op::Gelu | Op::Softmax => Ok(x),
            Op::BatchnormAffine {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let c = x[0];
                for p in [gamma, beta, mean, var] {
                    let s = w(p)?;
                    if s != [c] {
                        return Err(err(format!("parameter `{p}` has shape {s:?}, expected [{c}]")));
                    }
                }
                if !(*eps >= 0.0) {
                    return Err(err("eps must be non-negative".into()));
                }
                Ok(x)
            }
            Op::ResidualBegin => {
                stack.push(x.clone());
                Ok(x)
            }
            Op::ResidualAdd => {
                let skip = stack
                    .pop()
                    .ok_or_else(|| err("residual_add without residual_begin".into()))?;
                if skip != x {
                    return Err(err(format!("residual shapes differ: {skip:?} vs {x:?}")));
                }
                Ok(x)
            }
            Op::Avgpool { kernel, stride } | Op::Maxpool { kernel, stride } => {
                if x.len() != 3 {
                    return Err(err(format!("pooling needs (c, h, w) input, got {x:?}")));
                }
                match (pooled(x[1], *kernel, *stride), pooled(x[2], *kernel, *stride)) {
                    (Some(h), Some(w)) => Ok(vec![x[0], h, w]),
                    _ => Err(err(format!("invalid pooling window {kernel}/{stride} for {x:?}"))),
                }
            }
            Op::Flatten => Ok(vec![numel(&x)]),
            Op::AttentionQkv {
                wq,
                wk,
                wv,
                heads,
                head_dim,
            } => {
                if x.len() != 2 {
                    return Err(err(format!("attention needs (seq, d) input, got {x:?}")));
                }
                if *heads == 0 || *head_dim == 0 {
                    return Err(err("heads and head_dim must be positive".into()));
                }
                let want = vec![x[1], heads * head_dim];
                for p in [wq, wk, wv] {
                    let s = w(p)?;
                    if s != want {
                        return Err(err(format!("projection `{p}` has shape {s:?}, expected {want:?}")));
                    }
                }
                Ok(vec![x[0], heads * head_dim])
            }
        }
    }
}
