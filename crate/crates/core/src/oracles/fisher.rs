use std::time::Instant;

use crate::error::Result;
use crate::hvp::{axpy, cg_solve, norm, CgConfig};
use crate::newton::{armijo_search, Batched, LayerOutcome, NewtonConfig, StepRecord, StepStatus, TrajectoryRow};
use crate::recon::batch_partition;
use crate::tensor::Tensor;

use super::hessian::{direct_newton, DenseSystem};

/// Gradient of each sample's loss term.
pub fn per_sample_grads<O: Batched<f64>>(obj: &O, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..obj.samples())
        .map(|i| Ok(obj.view(&[i])?.loss_grad(x)?.1))
        .collect()
}

/// `F = (1/N) Σ gᵢgᵢᵀ`.
pub fn fisher_matrix(grads: &[Vec<f64>], m: usize) -> Tensor<f64> {
    let mut f = Tensor::zeros(&[m, m]);
    let inv = 1.0 / grads.len() as f64;
    for g in grads {
        for i in 0..m {
            let gi = g[i] * inv;
            if gi == 0.0 {
                continue;
            }
            let row = &mut f.data_mut()[i * m..(i + 1) * m];
            for (r, &gj) in row.iter_mut().zip(g) {
                *r += gi * gj;
            }
        }
    }
    f
}

/// `F·v = (1/N) Σ (gᵢᵀv) gᵢ` without forming `F`.
pub fn fisher_matvec(grads: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let inv = 1.0 / grads.len() as f64;
    for g in grads {
        let s: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
        axpy(s * inv, g, &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherStep {
    pub delta: Vec<f64>,
    pub grad: Vec<f64>,
    pub loss: f64,
    /// Whether `F` was assembled (otherwise CG on `F·v`).
    pub explicit: bool,
    pub cg_iters: usize,
}

/// `δ = −(F + λI)⁻¹ ∇L` on one batch.
pub fn fisher_newton_step<O: Batched<f64>>(
    obj: &O,
    x: &[f64],
    lambda: f64,
    cap: usize,
    cg: &CgConfig,
) -> Result<FisherStep> {
    let (loss, grad) = obj.loss_grad(x)?;
    let grads = per_sample_grads(obj, x)?;
    let m = obj.dim();
    if m <= cap {
        let sys = DenseSystem {
            h: fisher_matrix(&grads, m),
            g: grad.clone(),
        };
        let delta = direct_newton(&sys, lambda)?;
        return Ok(FisherStep {
            delta,
            grad,
            loss,
            explicit: true,
            cg_iters: 0,
        });
    }
    let cfg = CgConfig { lambda, ..*cg };
    let report = cg_solve(|v| Ok(fisher_matvec(&grads, v)), &grad, &cfg)?;
    Ok(FisherStep {
        delta: report.delta,
        grad,
        loss,
        explicit: false,
        cg_iters: report.iters,
    })
}

/// The Newton driver's batch loop with the Fisher step in place of CG on
/// the Hessian. Batches the Armijo search rejects are skipped.
pub fn fisher_optimize<O: Batched<f64>>(
    obj: &O,
    x0: Vec<f64>,
    cfg: &NewtonConfig,
    cap: usize,
    seed: u64,
    layer: &str,
) -> Result<LayerOutcome<f64>> {
    cfg.validate()?;
    let mut x = x0;
    let loss_init = obj.loss(&x)?;
    let mut trajectory = Vec::new();
    let mut counter = 0;
    for epoch in 0..cfg.max_epochs {
        let parts = batch_partition(obj.samples(), cfg.batch_size, seed, epoch)?;
        let take = cfg.batches.unwrap_or(parts.len()).min(parts.len());
        for rows in &parts[..take] {
            let started = Instant::now();
            let batch = obj.view(rows)?;
            let step = fisher_newton_step(&batch, &x, cfg.cg.lambda, cap, &cfg.cg)?;
            let mut rec = StepRecord {
                loss_pre: step.loss,
                loss_post: step.loss,
                alpha: 0.0,
                cg_iters: step.cg_iters,
                hvp_calls: 0,
                delta_norm: norm(&step.delta),
                slope: step.delta.iter().zip(&step.grad).map(|(a, b)| a * b).sum(),
                lambda: cfg.cg.lambda,
                status: StepStatus::Skipped,
            };
            if rec.delta_norm == 0.0 {
                rec.status = StepStatus::Stationary;
            } else if let Some((alpha, loss)) = armijo_search(&batch, &x, &step.delta, &step.grad, step.loss, cfg)? {
                axpy(alpha, &step.delta, &mut x);
                rec.alpha = alpha;
                rec.loss_post = loss;
                rec.status = StepStatus::Accepted;
            }
            trajectory.push(TrajectoryRow {
                layer: layer.to_string(),
                batch: counter,
                step: rec,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            counter += 1;
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
