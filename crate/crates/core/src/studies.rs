//! Desk-scale ablation studies on a small trained CNN.
//!
//! [`ToyCnnBench`] trains a two-convolution network on seeded synthetic
//! data. The studies run on any graph and emit flat rows that serialize to
//! CSV:
//!
//! | study | CSV columns |
//! |-------|-------------|
//! | [`k_sweep`] | `k,layer,horizon,loss_magnitude,loss_final,loss_own_output,seconds` |
//! | [`cg_iters_sweep`] | `max_iters,batch,loss_pre,loss_post,alpha,cg_iters,hvp_calls,status,wall_ms` |
//! | [`sgd_vs_newton`] | `method,lr,step,loss` |
//! | [`fisher_vs_newton`] | `method,step,loss_pre,loss_post,alpha,status,wall_ms` |
//!
//! Losses in the SGD and Fisher tables are mini-batch losses; the summary
//! structs carry full-data losses.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::netgraph::NetworkGraph;
use crate::newton::{optimize, NewtonConfig, StepStatus, TrajectoryRow};
use crate::oracles::{fisher_optimize, sgd_baseline, DEFAULT_CAP};
use crate::pipeline::data::{Dataset, SyntheticSpec};
use crate::pipeline::{accuracy, layer_losses, prune_network, MaskSpec, Method, PruneConfig, PruneOutcome};
use crate::recon::ReconstructionTask;
use crate::tensor::Tensor;
use crate::zoo::{self, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCnnBench {
    pub data: SyntheticSpec,
    /// Samples kept for training; the rest are held out.
    pub train_samples: usize,
    pub width: usize,
    pub train: TrainConfig,
    pub calib_samples: usize,
    pub calib_seed: u64,
    pub init_seed: u64,
}

impl Default for ToyCnnBench {
    fn default() -> Self {
        ToyCnnBench {
            data: SyntheticSpec {
                samples: 3000,
                feature_shape: vec![4, 8, 8],
                classes: 10,
                noise: 2.0,
                seed: 1,
            },
            train_samples: 2000,
            width: 8,
            train: TrainConfig {
                epochs: 8,
                lr: 0.02,
                ..TrainConfig::default()
            },
            calib_samples: 512,
            calib_seed: 3,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bench {
    pub dense: NetworkGraph,
    pub train: Dataset,
    pub test: Dataset,
    pub calib: Tensor,
    pub train_report: TrainReport,
}

impl ToyCnnBench {
    pub fn build(&self) -> Result<Bench> {
        let shape = &self.data.feature_shape;
        let [c, h, w] = shape[..] else {
            return Err(Error::Config(format!("the toy CNN needs (c, h, w) features, got {shape:?}")));
        };
        let all = self.data.generate()?;
        let (train, test) = all.split(self.train_samples)?;
        let manifest = zoo::cnn([c, h, w], self.width, self.data.classes)?;
        let mut dense = zoo::init(&manifest, self.init_seed)?;
        let train_report = zoo::train(&mut dense, &train, &self.train)?;
        let calib = train.calibration(self.calib_samples, self.calib_seed)?.x;
        Ok(Bench {
            dense,
            train,
            test,
            calib,
            train_report,
        })
    }
}

/// Total element count of all weights.
pub fn param_count(graph: &NetworkGraph) -> usize {
    graph.weights().values().map(Tensor::numel).sum()
}

/// Magnitude pruning and SNOWS from the same masks, compared layer by layer
/// and on held-out accuracy.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub magnitude: PruneOutcome,
    pub snows: PruneOutcome,
    /// K-step losses of each result, inputs cascaded through that result.
    pub magnitude_losses: Vec<f64>,
    pub snows_losses: Vec<f64>,
    pub dense_accuracy: f64,
    pub magnitude_accuracy: f64,
    pub snows_accuracy: f64,
}

pub fn compare_with_magnitude(dense: &NetworkGraph, cfg: &PruneConfig, calib: &Tensor, test: &Dataset) -> Result<Comparison> {
    let snows = prune_network(dense, &PruneConfig { method: Method::Snows, ..cfg.clone() }, calib)?;
    let magnitude = prune_network(dense, &PruneConfig { method: Method::Magnitude, ..cfg.clone() }, calib)?;
    let losses = |g: &NetworkGraph| -> Result<Vec<f64>> {
        Ok(layer_losses(dense, g, calib, cfg.k)?.into_iter().map(|l| l.loss).collect())
    };
    Ok(Comparison {
        magnitude_losses: losses(&magnitude.graph)?,
        snows_losses: losses(&snows.graph)?,
        dense_accuracy: accuracy(dense, test)?,
        magnitude_accuracy: accuracy(&magnitude.graph, test)?,
        snows_accuracy: accuracy(&snows.graph, test)?,
        magnitude,
        snows,
    })
}

pub fn write_csv<R: Serialize>(rows: &[R], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub layer: String,
    pub horizon: usize,
    pub loss_magnitude: f64,
    pub loss_final: f64,
    /// Reconstruction error at the layer's own output.
    pub loss_own_output: f64,
    /// Wall time of the whole run at this `k`.
    pub seconds: f64,
}

/// Prunes the whole network once per `k`.
pub fn k_sweep(graph: &NetworkGraph, calib: &Tensor, spec: &MaskSpec, ks: &[usize], newton: &NewtonConfig, seed: u64) -> Result<Vec<KSweepRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut cfg = PruneConfig::uniform(graph.manifest(), spec.clone(), k);
        cfg.newton = *newton;
        cfg.seed = seed;
        let started = Instant::now();
        let out = prune_network(graph, &cfg, calib)?;
        let seconds = started.elapsed().as_secs_f64();
        for l in out.report.layers {
            rows.push(KSweepRow {
                k,
                layer: l.name,
                horizon: l.horizon,
                loss_magnitude: l.loss_magnitude,
                loss_final: l.loss_final,
                loss_own_output: l.per_k_final[0],
                seconds,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub max_iters: usize,
    pub batch: usize,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub alpha: f64,
    pub cg_iters: usize,
    pub hvp_calls: usize,
    pub status: StepStatus,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgSweepSummary {
    pub max_iters: usize,
    pub loss_init: f64,
    pub loss_final: f64,
    pub cg_iters: usize,
    pub seconds: f64,
}

/// Optimizes `task` once per CG iteration cap.
pub fn cg_iters_sweep(
    task: &ReconstructionTask,
    caps: &[usize],
    newton: &NewtonConfig,
    seed: u64,
) -> Result<(Vec<StepRow>, Vec<CgSweepSummary>)> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &max_iters in caps {
        let mut cfg = *newton;
        cfg.cg.max_iters = max_iters;
        let started = Instant::now();
        let out = optimize(task, task.initial_point()?, &cfg, seed, "cg-sweep")?;
        let seconds = started.elapsed().as_secs_f64();
        summary.push(CgSweepSummary {
            max_iters,
            loss_init: out.loss_init,
            loss_final: out.loss_final,
            cg_iters: out.trajectory.iter().map(|r| r.step.cg_iters).sum(),
            seconds,
        });
        rows.extend(out.trajectory.iter().map(|r| step_row(max_iters, r)));
    }
    Ok((rows, summary))
}

fn step_row(max_iters: usize, r: &TrajectoryRow) -> StepRow {
    StepRow {
        max_iters,
        batch: r.batch,
        loss_pre: r.step.loss_pre,
        loss_post: r.step.loss_post,
        alpha: r.step.alpha,
        cg_iters: r.step.cg_iters,
        hvp_calls: r.step.hvp_calls,
        status: r.step.status,
        wall_ms: r.wall_ms,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    /// Learning rate; empty for Newton.
    pub lr: Option<f64>,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdRun {
    pub lr: f64,
    pub diverged: bool,
    pub loss_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdVsNewton {
    pub loss_init: f64,
    pub newton_steps: usize,
    pub newton_loss: f64,
    pub newton_seconds: f64,
    pub sgd: Vec<SgdRun>,
    pub sgd_seconds: f64,
}

impl SgdVsNewton {
    /// Lowest final loss over SGD runs that did not diverge.
    pub fn best_sgd(&self) -> Option<&SgdRun> {
        self.sgd
            .iter()
            .filter(|r| !r.diverged && r.loss_final.is_finite())
            .min_by(|a, b| a.loss_final.total_cmp(&b.loss_final))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSettings {
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for SgdSettings {
    fn default() -> Self {
        SgdSettings {
            steps: 2000,
            batch_size: 128,
        }
    }
}

pub fn sgd_vs_newton(
    task: &ReconstructionTask,
    newton: &NewtonConfig,
    lrs: &[f64],
    sgd: &SgdSettings,
    seed: u64,
) -> Result<(Vec<CurveRow>, SgdVsNewton)> {
    let x0 = task.initial_point()?;
    let started = Instant::now();
    let n = optimize(task, x0.clone(), newton, seed, "newton")?;
    let newton_seconds = started.elapsed().as_secs_f64();
    let mut rows: Vec<CurveRow> = n
        .trajectory
        .iter()
        .map(|r| CurveRow {
            method: "newton".into(),
            lr: None,
            step: r.batch,
            loss: r.step.loss_post,
        })
        .collect();
    let started = Instant::now();
    let mut runs = Vec::new();
    for &lr in lrs {
        let out = sgd_baseline(task, x0.clone(), lr, sgd.steps, sgd.batch_size, seed)?;
        rows.extend(out.rows.iter().map(|r| CurveRow {
            method: "sgd".into(),
            lr: Some(lr),
            step: r.step,
            loss: r.loss,
        }));
        runs.push(SgdRun {
            lr,
            diverged: out.diverged,
            loss_final: out.loss_final,
        });
    }
    let summary = SgdVsNewton {
        loss_init: n.loss_init,
        newton_steps: n.trajectory.len(),
        newton_loss: n.loss_final,
        newton_seconds,
        sgd: runs,
        sgd_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((rows, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStepRow {
    pub method: String,
    pub step: usize,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub alpha: f64,
    pub status: StepStatus,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherVsNewton {
    pub loss_init: f64,
    pub newton_loss: f64,
    pub newton_seconds: f64,
    pub fisher_loss: f64,
    pub fisher_seconds: f64,
}

/// Same batches, same damping; the Fisher run replaces the Hessian with
/// the empirical outer product of per-sample gradients.
pub fn fisher_vs_newton(task: &ReconstructionTask, cfg: &NewtonConfig, seed: u64) -> Result<(Vec<MethodStepRow>, FisherVsNewton)> {
    let x0 = task.initial_point()?;
    let started = Instant::now();
    let n = optimize(task, x0.clone(), cfg, seed, "newton")?;
    let newton_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let f = fisher_optimize(task, x0, cfg, DEFAULT_CAP, seed, "fisher")?;
    let fisher_seconds = started.elapsed().as_secs_f64();
    let rows = [("newton", &n.trajectory), ("fisher", &f.trajectory)]
        .into_iter()
        .flat_map(|(m, t)| {
            t.iter().map(move |r| MethodStepRow {
                method: m.into(),
                step: r.batch,
                loss_pre: r.step.loss_pre,
                loss_post: r.step.loss_post,
                alpha: r.step.alpha,
                status: r.step.status,
                wall_ms: r.wall_ms,
            })
        })
        .collect();
    Ok((
        rows,
        FisherVsNewton {
            loss_init: n.loss_init,
            newton_loss: n.loss_final,
            newton_seconds,
            fisher_loss: f.loss_final,
            fisher_seconds,
        },
    ))
}

/// Magnitude masks for every weight of the named layer.
pub fn layer_masks(graph: &NetworkGraph, layer: &str, spec: &MaskSpec) -> Result<Vec<Mask>> {
    layer
        .split('+')
        .map(|w| {
            let t = graph.weight(w)?;
            match spec {
                MaskSpec::Unstructured { sparsity } => Mask::magnitude_unstructured(t, *sparsity),
                MaskSpec::NOfM { n, m } => Mask::magnitude_nm(t, *n, *m),
                MaskSpec::Import(_) => Err(Error::Config("studies take magnitude masks only".into())),
            }
        })
        .collect()
}
