//! A toy transformer block and its reconstruction tasks.
//!
//! The block is pre-norm-free: an attention sub-block and an MLP
//! sub-block, each wrapped in a residual connection.
//!
//! | op | kind | target |
//! |----|------|--------|
//! | 0 | `residual_begin` | |
//! | 1 | `attention_qkv` (`attn.q`, `attn.k`, `attn.v`) | |
//! | 2 | `attention_out` (`attn.o`) | |
//! | 3 | `residual_add` | yes |
//! | 4 | `residual_begin` | |
//! | 5 | `dense` (`mlp0`, with bias) | |
//! | 6 | `gelu` | yes |
//! | 7 | `dense` (`mlp3`, with bias) | |
//! | 8 | `residual_add` | yes |
//!
//! Targets are the two sub-block outputs and the GeLU, so `K = 1` from
//! `mlp0` reconstructs the GeLU activations and `K = 1` from the
//! projections reconstructs the attention sub-block output. The three
//! projections are one pruning layer: their active coordinates are laid
//! out Q, then K, then V, each row-major.
//!
//! ```
//! use snows::masks::Mask;
//! use snows::vit::{qkv_joint_task, AttentionBlockSpec};
//! use snows::hvp::Objective;
//! use snows::{Rng, Tensor};
//!
//! let spec = AttentionBlockSpec { d: 8, heads: 2, head_dim: 4, seq: 4, mlp_hidden: 16 };
//! let net = spec.init(1).unwrap();
//! let x: Tensor = Rng::new(2).normal_tensor(&[16, 4, 8], 1.0);
//! let masks = ["attn.q", "attn.k", "attn.v"]
//!     .map(|w| Mask::magnitude_nm(net.weight(w).unwrap(), 2, 4).unwrap());
//! let task = qkv_joint_task(&net, 1, masks, &x).unwrap();
//! assert_eq!(task.dim(), 3 * 8 * 8 / 2);
//! assert!(task.loss(&task.initial_point().unwrap()).unwrap() > 0.0);
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvp::ActiveSet;
use crate::masks::Mask;
use crate::netgraph::{Manifest, NetworkGraph, Op, OpSpec};
use crate::recon::ReconstructionTask;
use crate::tensor::{Rng, Tensor};

pub const QKV_OP: usize = 1;
pub const OUT_OP: usize = 2;
pub const MLP0_OP: usize = 5;
pub const MLP3_OP: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionBlockSpec {
    /// Embedding width.
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Sequence length.
    pub seq: usize,
    pub mlp_hidden: usize,
}

impl AttentionBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.d, self.heads, self.head_dim, self.seq, self.mlp_hidden].contains(&0) {
            return Err(Error::Config(format!("attention block dimensions must be positive: {self:?}")));
        }
        if self.heads * self.head_dim != self.d {
            return Err(Error::Config(format!(
                "heads·head_dim = {} must equal d = {} for the residual connection",
                self.heads * self.head_dim,
                self.d
            )));
        }
        Ok(())
    }

    /// Attention logit scale `1/√d_H`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        self.validate()?;
        let hd = self.heads * self.head_dim;
        let weights: BTreeMap<String, Vec<usize>> = [
            ("attn.q", vec![self.d, hd]),
            ("attn.k", vec![self.d, hd]),
            ("attn.v", vec![self.d, hd]),
            ("attn.o", vec![hd, self.d]),
            ("mlp0.w", vec![self.d, self.mlp_hidden]),
            ("mlp0.b", vec![self.mlp_hidden]),
            ("mlp3.w", vec![self.mlp_hidden, self.d]),
            ("mlp3.b", vec![self.d]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();
        let dense = |w: &str, b: &str| Op::Dense {
            weight: w.into(),
            bias: Some(b.into()),
        };
        let m = Manifest {
            input_shape: vec![self.seq, self.d],
            weights,
            prunable: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp0.w", "mlp3.w"]
                .map(String::from)
                .to_vec(),
            ops: vec![
                OpSpec::new(Op::ResidualBegin),
                OpSpec::new(Op::AttentionQkv {
                    wq: "attn.q".into(),
                    wk: "attn.k".into(),
                    wv: "attn.v".into(),
                    heads: self.heads,
                    head_dim: self.head_dim,
                }),
                OpSpec::new(Op::AttentionOut {
                    weight: "attn.o".into(),
                    bias: None,
                }),
                OpSpec::target(Op::ResidualAdd),
                OpSpec::new(Op::ResidualBegin),
                OpSpec::new(dense("mlp0.w", "mlp0.b")),
                OpSpec::target(Op::Gelu),
                OpSpec::new(dense("mlp3.w", "mlp3.b")),
                OpSpec::target(Op::ResidualAdd),
            ],
        };
        m.validate()?;
        Ok(m)
    }

    /// He-normal matrices and small random biases.
    pub fn init(&self, seed: u64) -> Result<NetworkGraph> {
        let m = self.manifest()?;
        let mut g = crate::zoo::init::<f64>(&m, seed)?;
        let mut rng = Rng::substream(seed, "init/bias");
        for b in ["mlp0.b", "mlp3.b"] {
            let shape = m.weight_shape(b)?.to_vec();
            g.replace_weight(b, rng.normal_tensor(&shape, 0.1))?;
        }
        Ok(g)
    }
}

fn task_at(graph: &NetworkGraph, op: usize, names: &[&str], masks: Vec<Mask>, k: usize, x: &Tensor) -> Result<ReconstructionTask> {
    let (state, _) = graph.forward_range(graph.input(x)?, 0, op, &[])?;
    let sub = Arc::new(graph.sub_network(op, k)?);
    let active = Arc::new(ActiveSet::new(names.iter().map(|s| s.to_string()).collect(), masks)?);
    ReconstructionTask::capture(sub, active, state)
}

/// Joint reconstruction over `(W_Q, W_K, W_V)` of a block built by
/// [`AttentionBlockSpec::manifest`]; `x` is the block input.
pub fn qkv_joint_task(graph: &NetworkGraph, k: usize, masks: [Mask; 3], x: &Tensor) -> Result<ReconstructionTask> {
    task_at(graph, QKV_OP, &["attn.q", "attn.k", "attn.v"], masks.to_vec(), k, x)
}

pub fn out_proj_task(graph: &NetworkGraph, k: usize, mask: Mask, x: &Tensor) -> Result<ReconstructionTask> {
    task_at(graph, OUT_OP, &["attn.o"], vec![mask], k, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpLayer {
    Mlp0,
    Mlp3,
}

/// Reconstruction for one MLP weight; its bias is carried but not optimized.
pub fn mlp_task(graph: &NetworkGraph, layer: MlpLayer, k: usize, mask: Mask, x: &Tensor) -> Result<ReconstructionTask> {
    match layer {
        MlpLayer::Mlp0 => task_at(graph, MLP0_OP, &["mlp0.w"], vec![mask], k, x),
        MlpLayer::Mlp3 => task_at(graph, MLP3_OP, &["mlp3.w"], vec![mask], k, x),
    }
}
