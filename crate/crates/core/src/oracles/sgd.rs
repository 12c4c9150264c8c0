use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvp::{axpy, dot};
use crate::newton::Batched;
use crate::recon::batch_partition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdRow {
    pub step: usize,
    /// Batch loss before the update.
    pub loss: f64,
    /// `‖W_t − W_0‖² / ‖W_0‖²`.
    pub dist: f64,
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub x: Vec<f64>,
    pub rows: Vec<SgdRow>,
    pub diverged: bool,
    pub loss_init: f64,
    pub loss_final: f64,
}

/// Plain mini-batch SGD on the active set with the batch-mean gradient
/// `∇L_B / |B|`.
pub fn sgd_baseline<O: Batched<f64>>(
    obj: &O,
    x0: Vec<f64>,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SgdOutcome> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let w0 = x0.clone();
    let w0_sq = dot(&w0, &w0).max(f64::MIN_POSITIVE);
    let mut x = x0;
    let loss_init = obj.loss(&x)?;
    let mut rows = Vec::with_capacity(steps);
    let mut diverged = false;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut epoch = 0;
    for step in 0..steps {
        if queue.is_empty() {
            queue = batch_partition(obj.samples(), batch_size, seed, epoch)?;
            queue.reverse();
            epoch += 1;
        }
        let rows_b = queue.pop().unwrap();
        let batch = obj.view(&rows_b)?;
        let (loss, g) = batch.loss_grad(&x)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            log::warn!("SGD diverged at step {step} (loss {loss:e})");
            diverged = true;
            break;
        }
        axpy(-lr / rows_b.len() as f64, &g, &mut x);
        let diff: f64 = x.iter().zip(&w0).map(|(a, b)| (a - b) * (a - b)).sum();
        rows.push(SgdRow {
            step,
            loss,
            dist: diff / w0_sq,
        });
    }
    let loss_final = if diverged { f64::NAN } else { obj.loss(&x)? };
    Ok(SgdOutcome {
        x,
        rows,
        diverged,
        loss_init,
        loss_final,
    })
}

pub fn write_sgd_csv(rows: &[SgdRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,loss,dist")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.dist)?;
    }
    Ok(())
}
