//! Full-network pruning: layers are pruned front to back, each against
//! dense targets, and the pruned activations are cascaded into the next
//! layer.
//!
//! A "layer" is one op together with its prunable weights; the three
//! projections of an `attention_qkv` op form a single layer and are
//! optimized jointly. For the layer at op `ℓ` the calibration activations
//! are pushed through the already pruned ops `..ℓ`, the dense outputs of
//! ops `ℓ..` are recorded as targets, and the K-step problem is solved.
//!
//! ```
//! use snows::netgraph::{Manifest, NetworkGraph};
//! use snows::pipeline::{prune_network, MaskSpec, PruneConfig};
//! use snows::{Rng, Tensor};
//!
//! let manifest = Manifest::from_json(r#"{
//!     "input_shape": [8],
//!     "weights": {"w1": [8, 8], "w2": [8, 4]},
//!     "prunable": ["w1", "w2"],
//!     "ops": [
//!         {"kind": "dense", "weight": "w1", "target": true},
//!         {"kind": "gelu", "target": true},
//!         {"kind": "dense", "weight": "w2", "target": true}
//!     ]
//! }"#).unwrap();
//! let mut rng = Rng::new(0);
//! let weights = manifest.weights.iter()
//!     .map(|(n, s)| (n.clone(), rng.normal_tensor(s, 0.5)))
//!     .collect();
//! let net = NetworkGraph::new(manifest, weights).unwrap();
//! let calib: Tensor = rng.normal_tensor(&[64, 8], 1.0);
//!
//! let cfg = PruneConfig::uniform(net.manifest(), MaskSpec::NOfM { n: 2, m: 4 }, 2);
//! let out = prune_network(&net, &cfg, &calib).unwrap();
//! assert_eq!(out.report.sparsity, 0.5);
//! for layer in &out.report.layers {
//!     assert!(layer.loss_final <= layer.loss_magnitude);
//! }
//! ```

pub mod checkpoint;
pub mod data;
mod eval;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use eval::{accuracy, layer_losses, predict, LayerLoss};

use crate::error::{Error, Result};
use crate::hvp::{ActiveSet, Objective};
use crate::masks::{Mask, MaskKind};
use crate::netgraph::{Activation, Manifest, NetworkGraph};
use crate::newton::{optimize_layer, write_trajectory_csv, NewtonConfig, StepStatus, TrajectoryRow};
use crate::recon::ReconstructionTask;
use crate::tensor::{Rng, Scalar, Tensor};

/// How the mask of one weight is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskSpec {
    /// Magnitude pruning of a fraction of all entries.
    Unstructured { sparsity: f64 },
    /// Magnitude N:M.
    NOfM { n: usize, m: usize },
    /// The mask stored for the same weight in a checkpoint file.
    Import(PathBuf),
}

impl FromStr for MaskSpec {
    type Err = Error;

    /// Parses `unstructured:S`, `nm:N:M` or `import:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "mask spec `{s}` is not one of unstructured:S, nm:N:M, import:PATH"
            ))
        };
        let (head, rest) = s.split_once(':').ok_or_else(bad)?;
        match head {
            "unstructured" => {
                let sparsity: f64 = rest.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&sparsity) {
                    return Err(Error::Config(format!("sparsity {sparsity} is outside [0, 1]")));
                }
                Ok(MaskSpec::Unstructured { sparsity })
            }
            "nm" => {
                let (n, m) = rest.split_once(':').ok_or_else(bad)?;
                let (n, m): (usize, usize) = (n.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
                if n == 0 || n > m {
                    return Err(Error::Config(format!("N:M needs 1 ≤ N ≤ M, got {n}:{m}")));
                }
                Ok(MaskSpec::NOfM { n, m })
            }
            "import" if !rest.is_empty() => Ok(MaskSpec::Import(PathBuf::from(rest))),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskSpec::Unstructured { sparsity } => write!(f, "unstructured:{sparsity}"),
            MaskSpec::NOfM { n, m } => write!(f, "nm:{n}:{m}"),
            MaskSpec::Import(p) => write!(f, "import:{}", p.display()),
        }
    }
}

impl TryFrom<String> for MaskSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskSpec> for String {
    fn from(m: MaskSpec) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Magnitude mask followed by the K-step Newton solve.
    Snows,
    /// Magnitude mask only.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Requested horizon K; each layer uses `min(K, K_max)`.
    pub k: usize,
    /// One entry per prunable weight.
    pub masks: BTreeMap<String, MaskSpec>,
    pub method: Method,
    #[serde(default)]
    pub newton: NewtonConfig,
    /// Root of the per-layer batch shuffling streams.
    #[serde(default)]
    pub seed: u64,
}

impl PruneConfig {
    /// The same mask spec for every prunable weight, SNOWS defaults.
    pub fn uniform(manifest: &Manifest, spec: MaskSpec, k: usize) -> Self {
        PruneConfig {
            k,
            masks: manifest.prunable.iter().map(|p| (p.clone(), spec.clone())).collect(),
            method: Method::Snows,
            newton: NewtonConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        self.newton.validate()?;
        for p in &manifest.prunable {
            if !self.masks.contains_key(p) {
                return Err(Error::Config(format!("no mask spec for prunable weight `{p}`")));
            }
        }
        if let Some(extra) = self.masks.keys().find(|k| !manifest.prunable.contains(k)) {
            return Err(Error::Config(format!("mask spec for `{extra}`, which is not prunable")));
        }
        Ok(())
    }
}

/// One op and the prunable weights it owns, in slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub op: usize,
    pub weights: Vec<String>,
}

impl Layer {
    pub fn name(&self) -> String {
        self.weights.join("+")
    }
}

/// Prunable layers in manifest order.
pub fn layers(manifest: &Manifest) -> Vec<Layer> {
    manifest
        .ops
        .iter()
        .enumerate()
        .filter_map(|(op, spec)| {
            let weights: Vec<String> = spec
                .op
                .prunable_slots()
                .into_iter()
                .filter(|w| manifest.prunable.iter().any(|p| p == w))
                .map(str::to_string)
                .collect();
            (!weights.is_empty()).then_some(Layer { op, weights })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub op: usize,
    pub weights: Vec<String>,
    pub masks: Vec<MaskKind>,
    pub requested_horizon: usize,
    pub horizon: usize,
    pub numel: usize,
    pub nnz: usize,
    /// Loss at the magnitude-pruned starting point `W ⊙ Z`.
    pub loss_magnitude: f64,
    pub loss_final: f64,
    pub per_k_magnitude: Vec<f64>,
    pub per_k_final: Vec<f64>,
    pub steps: usize,
    pub accepted: usize,
    pub skipped: usize,
    pub cg_iters: usize,
    pub hvp_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub version: String,
    pub manifest_hash: String,
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub calibration_samples: usize,
    pub layers: Vec<LayerReport>,
    /// Layers taken as already pruned from a resumed checkpoint.
    pub resumed: Vec<String>,
    pub prunable_params: usize,
    pub zeros: usize,
    pub sparsity: f64,
    /// Largest difference between the cascaded input of the last layer and
    /// a fresh forward pass of the pruned prefix.
    pub cascade_max_abs_diff: f64,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome<T: Scalar = f64> {
    pub graph: NetworkGraph<T>,
    pub masks: BTreeMap<String, Mask>,
    pub report: PruneReport,
    pub trajectory: Vec<TrajectoryRow>,
}

impl<T: Scalar> PruneOutcome<T> {
    /// Writes `report.json` and one trajectory CSV per layer under `dir`.
    pub fn write_report(&self, dir: &Path) -> Result<()> {
        write_report(dir, &self.report, &self.trajectory)
    }
}

pub fn write_report(dir: &Path, report: &PruneReport, trajectory: &[TrajectoryRow]) -> Result<()> {
    std::fs::create_dir_all(dir.join("trajectories"))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    checkpoint::write_atomic(&dir.join("report.json"), json.as_bytes())?;
    for layer in &report.layers {
        let rows: Vec<TrajectoryRow> = trajectory.iter().filter(|r| r.layer == layer.name).cloned().collect();
        let mut buf = Vec::new();
        write_trajectory_csv(&rows, &mut buf)?;
        let file = format!("{}.csv", layer.name.replace(['/', '\\'], "_"));
        checkpoint::write_atomic(&dir.join("trajectories").join(file), &buf)?;
    }
    Ok(())
}

/// Extra controls for [`prune_network_with`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Masks of layers already pruned in the input graph; those layers are
    /// skipped.
    pub completed: BTreeMap<String, Mask>,
    /// Where to save completed layers if a later layer fails.
    pub partial_checkpoint: Option<PathBuf>,
}

pub fn prune_network<T: Scalar>(graph: &NetworkGraph<T>, cfg: &PruneConfig, calib: &Tensor<T>) -> Result<PruneOutcome<T>> {
    prune_network_with(graph, cfg, calib, RunOptions::default())
}

fn build_mask<T: Scalar>(
    name: &str,
    spec: &MaskSpec,
    w: &Tensor<T>,
    imports: &mut BTreeMap<PathBuf, BTreeMap<String, Mask>>,
) -> Result<Mask> {
    match spec {
        MaskSpec::Unstructured { sparsity } => Mask::magnitude_unstructured(w, *sparsity),
        MaskSpec::NOfM { n, m } => Mask::magnitude_nm(w, *n, *m),
        MaskSpec::Import(path) => {
            if !imports.contains_key(path) {
                let bytes = std::fs::read(path).map_err(|e| {
                    Error::Config(format!("cannot read mask file `{}`: {e}", path.display()))
                })?;
                imports.insert(path.clone(), checkpoint::RawCheckpoint::decode(&bytes)?.masks()?);
            }
            let mask = imports[path].get(name).cloned().ok_or_else(|| {
                Error::Mask(format!("`{}` holds no mask for tensor `{name}`", path.display()))
            })?;
            mask.validate_for(w.shape())
                .map_err(|e| Error::Mask(format!("imported mask for tensor `{name}`: {e}")))?;
            Ok(mask)
        }
    }
}

/// Prunes every layer of `graph` in manifest order on the calibration batch.
pub fn prune_network_with<T: Scalar>(
    graph: &NetworkGraph<T>,
    cfg: &PruneConfig,
    calib: &Tensor<T>,
    opts: RunOptions,
) -> Result<PruneOutcome<T>> {
    cfg.validate(graph.manifest())?;
    let mut g = graph.clone();
    let mut masks = opts.completed;
    let mut state = g.input(calib)?;
    let mut cur = 0;
    let mut reports = Vec::new();
    let mut resumed = Vec::new();
    let mut trajectory = Vec::new();
    let mut imports = BTreeMap::new();
    for layer in layers(graph.manifest()) {
        state = g.forward_range(state, cur, layer.op, &[])?.0;
        cur = layer.op;
        let name = layer.name();
        if layer.weights.iter().all(|w| masks.contains_key(w)) {
            resumed.push(name);
            continue;
        }
        let result = prune_layer(&g, cfg, &layer, &state, &mut imports);
        match result {
            Ok((weights, layer_masks, report, rows)) => {
                for (w, t) in layer.weights.iter().zip(weights) {
                    g.replace_weight(w, t)?;
                }
                for (w, m) in layer.weights.iter().zip(layer_masks) {
                    masks.insert(w.clone(), m);
                }
                reports.push(report);
                trajectory.extend(rows);
            }
            Err(e) => {
                if let Some(path) = &opts.partial_checkpoint {
                    checkpoint::save(path, &g, &masks)?;
                    log::warn!("saved {} completed layer masks to {}", masks.len(), path.display());
                }
                return Err(Error::Layer {
                    layer: name,
                    source: Box::new(e),
                });
            }
        }
    }
    let cascade_max_abs_diff = if cur > 0 {
        let fresh = g.forward_range(g.input(calib)?, 0, cur, &[])?.0;
        max_abs_diff(&fresh, &state)?
    } else {
        0.0
    };
    let prunable_params: usize = masks.values().map(Mask::numel).sum();
    let zeros: usize = masks.values().map(|m| m.numel() - m.nnz()).sum();
    let report = PruneReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        manifest_hash: graph.manifest().hash(),
        method: cfg.method,
        k: cfg.k,
        seed: cfg.seed,
        calibration_samples: calib.shape()[0],
        layers: reports,
        resumed,
        prunable_params,
        zeros,
        sparsity: if prunable_params == 0 { 0.0 } else { zeros as f64 / prunable_params as f64 },
        cascade_max_abs_diff,
    };
    Ok(PruneOutcome {
        graph: g,
        masks,
        report,
        trajectory,
    })
}

/// The reconstruction task of the layer named `name` (see [`Layer::name`])
/// with inputs pushed through `graph` as it stands and targets from its
/// current weights.
pub fn layer_task<T: Scalar>(
    graph: &NetworkGraph<T>,
    name: &str,
    masks: Vec<Mask>,
    k: usize,
    calib: &Tensor<T>,
) -> Result<ReconstructionTask<T>> {
    let layer = layers(graph.manifest())
        .into_iter()
        .find(|l| l.name() == name)
        .ok_or_else(|| Error::Config(format!("no prunable layer named `{name}`")))?;
    let (state, _) = graph.forward_range(graph.input(calib)?, 0, layer.op, &[])?;
    let sub = Arc::new(graph.sub_network(layer.op, k)?);
    let active = Arc::new(ActiveSet::new(layer.weights, masks)?);
    ReconstructionTask::capture(sub, active, state)
}

fn max_abs_diff<T: Scalar>(a: &Activation<T>, b: &Activation<T>) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y) in std::iter::once((&a.x, &b.x)).chain(a.skips.iter().zip(&b.skips)) {
        if x.shape() != y.shape() {
            return Err(Error::shape("cascade check", x.shape(), y.shape()));
        }
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max((p.to_f64() - q.to_f64()).abs());
        }
    }
    Ok(worst)
}

type LayerResult<T> = (Vec<Tensor<T>>, Vec<Mask>, LayerReport, Vec<TrajectoryRow>);

fn prune_layer<T: Scalar>(
    g: &NetworkGraph<T>,
    cfg: &PruneConfig,
    layer: &Layer,
    state: &Activation<T>,
    imports: &mut BTreeMap<PathBuf, BTreeMap<String, Mask>>,
) -> Result<LayerResult<T>> {
    let name = layer.name();
    let mut layer_masks = Vec::with_capacity(layer.weights.len());
    for w in &layer.weights {
        layer_masks.push(build_mask(w, &cfg.masks[w], g.weight(w)?, imports)?);
    }
    let sub = Arc::new(g.sub_network(layer.op, cfg.k)?);
    let active = Arc::new(ActiveSet::new(layer.weights.clone(), layer_masks.clone())?);
    let task = ReconstructionTask::capture(sub.clone(), active, state.clone())?;
    let x0 = task.initial_point()?;
    let loss_magnitude = task.loss(&x0)?;
    let per_k_magnitude = task.per_k_losses(&x0)?;
    let (weights, x, rows) = match cfg.method {
        Method::Magnitude => (task.weights_at(&x0)?, x0, Vec::new()),
        Method::Snows => {
            let seed = Rng::substream(cfg.seed, &format!("newton/{name}")).next_u64();
            let (w, out) = optimize_layer(&task, &cfg.newton, seed, &name)?;
            (w, out.x, out.trajectory)
        }
    };
    let loss_final = task.loss(&x)?;
    if !loss_final.is_finite() {
        return Err(Error::Numerical(format!("final loss of layer `{name}` is {loss_final}")));
    }
    if loss_final > loss_magnitude {
        log::warn!(
            "layer `{name}`: calibration loss rose from {loss_magnitude:e} to {loss_final:e}; \
             mini-batch steps descend on their own batch only, try a larger batch_size"
        );
    }
    let count = |s: StepStatus| rows.iter().filter(|r| r.step.status == s).count();
    let report = LayerReport {
        name,
        op: layer.op,
        weights: layer.weights.clone(),
        masks: layer_masks.iter().map(Mask::kind).collect(),
        requested_horizon: sub.requested_horizon(),
        horizon: sub.horizon(),
        numel: layer_masks.iter().map(Mask::numel).sum(),
        nnz: layer_masks.iter().map(Mask::nnz).sum(),
        loss_magnitude,
        loss_final,
        per_k_magnitude,
        per_k_final: task.per_k_losses(&x)?,
        steps: rows.len(),
        accepted: count(StepStatus::Accepted),
        skipped: count(StepStatus::Skipped),
        cg_iters: rows.iter().map(|r| r.step.cg_iters).sum(),
        hvp_calls: rows.iter().map(|r| r.step.hvp_calls).sum(),
    };
    Ok((weights, layer_masks, report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_spec_parses_and_prints() {
        for s in ["unstructured:0.5", "nm:2:4", "import:masks.snws"] {
            assert_eq!(s.parse::<MaskSpec>().unwrap().to_string(), s);
        }
        for bad in ["nm:5:4", "unstructured:1.5", "dense", "import:", "nm:2"] {
            assert!(bad.parse::<MaskSpec>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&MaskSpec::NOfM { n: 1, m: 4 }).unwrap();
        assert_eq!(json, "\"nm:1:4\"");
    }

    #[test]
    fn attention_projections_form_one_layer() {
        let m = Manifest::from_json(
            r#"{"input_shape": [3, 4],
                "weights": {"q": [4, 4], "k": [4, 4], "v": [4, 4], "o": [4, 4]},
                "prunable": ["q", "k", "v", "o"],
                "ops": [{"kind": "attention_qkv", "wq": "q", "wk": "k", "wv": "v", "heads": 2, "head_dim": 2},
                        {"kind": "attention_out", "weight": "o", "target": true}]}"#,
        )
        .unwrap();
        let ls = layers(&m);
        assert_eq!(ls.len(), 2);
        assert_eq!(ls[0].name(), "q+k+v");
        assert_eq!(ls[1], Layer { op: 1, weights: vec!["o".into()] });
    }
}
