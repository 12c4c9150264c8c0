//! Stochastic Newton with Armijo backtracking for one layer.
//!
//! Each mini-batch step solves `(H + λI) δ = −g` on the active set with CG,
//! then backtracks from `α = 1` until
//! `L(x + αδ) ≤ L(x) + αβ δᵀg`. When no step is accepted, `λ` is raised
//! tenfold and the step retried; after the retries the batch is skipped.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvp::{axpy, cg_solve, dot, hvp, norm, CgConfig, Objective};
use crate::recon::{batch_partition, ReconstructionTask};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Batches per epoch; `None` uses every batch.
    pub batches: Option<usize>,
    pub batch_size: usize,
    pub cg: CgConfig,
    pub armijo_beta: f64,
    pub armijo_shrink: f64,
    pub alpha_min: f64,
    pub max_epochs: usize,
    /// Damping escalations tried before a batch is skipped.
    pub lambda_retries: usize,
    /// Stop once an epoch improves the full loss by less than this fraction.
    pub early_stop: Option<f64>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            batches: None,
            batch_size: 128,
            cg: CgConfig::default(),
            armijo_beta: 1e-5,
            armijo_shrink: 0.5,
            alpha_min: 2f64.powi(-20),
            max_epochs: 1,
            lambda_retries: 3,
            early_stop: None,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        self.cg.validate()?;
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.armijo_beta) {
            return Err(Error::Config(format!("armijo_beta must be in (0, 1), got {}", self.armijo_beta)));
        }
        if !open_unit(self.armijo_shrink) {
            return Err(Error::Config(format!(
                "armijo_shrink must be in (0, 1), got {}",
                self.armijo_shrink
            )));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= 1.0) {
            return Err(Error::Config(format!("alpha_min must be in (0, 1], got {}", self.alpha_min)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.batches == Some(0) {
            return Err(Error::Config(
                "batch_size, batches and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Accepted,
    /// Gradient below the CG tolerance; nothing to do.
    Stationary,
    /// No admissible step after all damping escalations.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss_pre: f64,
    pub loss_post: f64,
    pub alpha: f64,
    pub cg_iters: usize,
    pub hvp_calls: usize,
    pub delta_norm: f64,
    /// `δᵀg` of the committed direction.
    pub slope: f64,
    /// Damping used by the last attempt.
    pub lambda: f64,
    pub status: StepStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub layer: String,
    pub batch: usize,
    #[serde(flatten)]
    pub step: StepRecord,
    pub wall_ms: f64,
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "layer,batch,loss_pre,loss_post,alpha,cg_iters,delta_norm,wall_ms")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{},{},{:e},{:.3}",
            r.layer, r.batch, r.step.loss_pre, r.step.loss_post, r.step.alpha, r.step.cg_iters, r.step.delta_norm, r.wall_ms
        )?;
    }
    Ok(())
}

/// Backtracks from `α = 1`. Returns the accepted `(α, L(x + αδ))`, or
/// `None` once `α` would fall below `alpha_min`.
pub fn armijo_search<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &[T],
    delta: &[T],
    g: &[T],
    loss0: f64,
    cfg: &NewtonConfig,
) -> Result<Option<(f64, f64)>> {
    let slope = dot(delta, g);
    if !(slope < 0.0) {
        return Err(Error::NonDescent(slope));
    }
    let mut alpha = 1.0;
    let mut trial = x.to_vec();
    while alpha >= cfg.alpha_min {
        trial.copy_from_slice(x);
        axpy(alpha, delta, &mut trial);
        let loss = obj.loss(&trial)?;
        if loss <= loss0 + alpha * cfg.armijo_beta * slope {
            return Ok(Some((alpha, loss)));
        }
        alpha *= cfg.armijo_shrink;
    }
    Ok(None)
}

/// One damped Newton step on `obj`, committed into `x` when accepted.
pub fn newton_step<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &mut [T],
    cfg: &NewtonConfig,
) -> Result<StepRecord> {
    let (loss0, g) = obj.loss_grad(x)?;
    if !loss0.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "loss {loss0:e} or its gradient is not finite (‖g‖ = {:e})",
            norm(&g)
        )));
    }
    let mut record = StepRecord {
        loss_pre: loss0,
        loss_post: loss0,
        alpha: 0.0,
        cg_iters: 0,
        hvp_calls: 0,
        delta_norm: 0.0,
        slope: 0.0,
        lambda: cfg.cg.lambda,
        status: StepStatus::Stationary,
    };
    let mode = cfg.cg.mode();
    let mut cg = cfg.cg;
    for attempt in 0..=cfg.lambda_retries {
        if attempt > 0 {
            cg.lambda = if cg.lambda > 0.0 { cg.lambda * 10.0 } else { 1e-8 };
            log::debug!("retrying Newton step with lambda = {:e}", cg.lambda);
        }
        record.lambda = cg.lambda;
        let xs: &[T] = x;
        let report = match cg_solve(|v| hvp(obj, xs, v, &g, mode), &g, &cg) {
            Ok(r) => r,
            Err(Error::Curvature { value, iteration }) => {
                log::debug!("CG curvature {value:e} at iteration {iteration}");
                record.status = StepStatus::Skipped;
                continue;
            }
            Err(e) => return Err(e),
        };
        record.cg_iters += report.iters;
        record.hvp_calls += report.hvp_calls;
        if report.iters == 0 {
            record.status = StepStatus::Stationary;
            return Ok(record);
        }
        record.delta_norm = norm(&report.delta);
        record.slope = dot(&report.delta, &g);
        match armijo_search(obj, x, &report.delta, &g, loss0, cfg) {
            Ok(Some((alpha, loss))) => {
                axpy(alpha, &report.delta, x);
                record.alpha = alpha;
                record.loss_post = loss;
                record.status = StepStatus::Accepted;
                return Ok(record);
            }
            Ok(None) | Err(Error::NonDescent(_)) => {
                record.status = StepStatus::Skipped;
            }
            Err(e) => return Err(e),
        }
    }
    record.alpha = 0.0;
    record.loss_post = loss0;
    Ok(record)
}

/// An objective that can be restricted to a subset of its samples.
pub trait Batched<T: Scalar>: Objective<T> + Sized {
    fn samples(&self) -> usize;
    fn view(&self, rows: &[usize]) -> Result<Self>;
}

impl<T: Scalar> Batched<T> for ReconstructionTask<T> {
    fn samples(&self) -> usize {
        ReconstructionTask::samples(self)
    }

    fn view(&self, rows: &[usize]) -> Result<Self> {
        ReconstructionTask::view(self, rows)
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutcome<T = f64> {
    pub x: Vec<T>,
    pub trajectory: Vec<TrajectoryRow>,
    pub loss_init: f64,
    pub loss_final: f64,
}

/// Runs Newton steps over seeded shuffled mini-batches starting from `x0`.
/// `loss_init`/`loss_final` are full-data losses.
pub fn optimize<T: Scalar, O: Batched<T>>(
    obj: &O,
    x0: Vec<T>,
    cfg: &NewtonConfig,
    seed: u64,
    layer: &str,
) -> Result<LayerOutcome<T>> {
    cfg.validate()?;
    let mut x = x0;
    let loss_init = obj.loss(&x)?;
    let mut trajectory = Vec::new();
    let mut prev = loss_init;
    let mut counter = 0;
    for epoch in 0..cfg.max_epochs {
        let parts = batch_partition(obj.samples(), cfg.batch_size, seed, epoch)?;
        let take = cfg.batches.unwrap_or(parts.len()).min(parts.len());
        for rows in &parts[..take] {
            let started = Instant::now();
            let batch = obj.view(rows)?;
            let step = newton_step(&batch, &mut x, cfg)?;
            trajectory.push(TrajectoryRow {
                layer: layer.to_string(),
                batch: counter,
                step,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            counter += 1;
        }
        if let Some(tol) = cfg.early_stop {
            let now = obj.loss(&x)?;
            let improved = (prev - now) / prev.max(f64::MIN_POSITIVE);
            prev = now;
            if improved < tol {
                break;
            }
        }
    }
    let loss_final = obj.loss(&x)?;
    Ok(LayerOutcome {
        x,
        trajectory,
        loss_init,
        loss_final,
    })
}

/// Optimizes a reconstruction task from `W ⊙ Z`, returning the full-shaped
/// weights of the pruned group with the outcome.
pub fn optimize_layer<T: Scalar>(
    task: &ReconstructionTask<T>,
    cfg: &NewtonConfig,
    seed: u64,
    layer: &str,
) -> Result<(Vec<Tensor<T>>, LayerOutcome<T>)> {
    let out = optimize(task, task.initial_point()?, cfg, seed, layer)?;
    Ok((task.weights_at(&out.x)?, out))
}
