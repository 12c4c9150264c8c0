use serde::Serialize;

use crate::error::{Error, Result};
use crate::hvp::{CgConfig, Objective};
use crate::newton::{newton_step, Batched, NewtonConfig};

use super::hessian::{direct_newton, DenseSystem};
use crate::tensor::Tensor;

/// `L(w) = ½(λ₁w₁² + λ₂w₂²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyQuadratic {
    pub l1: f64,
    pub l2: f64,
}

impl Objective<f64> for ToyQuadratic {
    fn dim(&self) -> usize {
        2
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * (self.l1 * x[0] * x[0] + self.l2 * x[1] * x[1]))
    }

    fn loss_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.loss(x)?, vec![self.l1 * x[0], self.l2 * x[1]]))
    }

    fn hvp_exact(&self, _x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.l1 * v[0], self.l2 * v[1]])
    }
}

impl Batched<f64> for ToyQuadratic {
    fn samples(&self) -> usize {
        1
    }

    fn view(&self, rows: &[usize]) -> Result<Self> {
        if rows != [0] {
            return Err(Error::Config(format!("the toy quadratic has one sample, asked for {rows:?}")));
        }
        Ok(*self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub kappa: f64,
    /// SGD converges only for `η < 2/λ_max`.
    pub eta_bound: f64,
    pub diverges: bool,
    /// Per-step factor on `w₁`, `1 − ηλ₁`.
    pub w1_contraction: f64,
    /// `⌈ln(ε/|w₁⁽⁰⁾|) / ln|1 − ηλ₁|⌉`.
    pub sgd_iters_closed_form: Option<usize>,
    /// Iterations of the numeric SGD loop until `|w₁| ≤ ε`.
    pub sgd_iters_numeric: Option<usize>,
    pub w2_after_one_sgd_step: f64,
    /// Undamped Newton steps until both coordinates are within `ε`.
    pub newton_steps: usize,
    pub newton_after_one_step: [f64; 2],
    pub direct_newton_after_one_step: [f64; 2],
}

/// Gradient descent versus Newton on the two-parameter quadratic.
pub fn toy_quadratic(l1: f64, l2: f64, w0: [f64; 2], eta: f64, eps: f64) -> Result<ToyReport> {
    if !(l1 > 0.0 && l2 > 0.0) {
        return Err(Error::Config(format!("curvatures must be positive, got {l1}, {l2}")));
    }
    if !(eta > 0.0 && eps > 0.0) {
        return Err(Error::Config("eta and eps must be positive".into()));
    }
    let toy = ToyQuadratic { l1, l2 };
    let lmax = l1.max(l2);
    let eta_bound = 2.0 / lmax;
    let diverges = eta >= eta_bound;
    let c1 = 1.0 - eta * l1;
    let closed = if diverges || w0[0].abs() <= eps {
        (w0[0].abs() <= eps).then_some(0)
    } else {
        Some(((eps / w0[0].abs()).ln() / c1.abs().ln()).ceil() as usize)
    };

    let mut numeric = None;
    if !diverges {
        let mut w = w0.to_vec();
        for k in 0..10_000_000usize {
            if w[0].abs() <= eps {
                numeric = Some(k);
                break;
            }
            let (_, g) = toy.loss_grad(&w)?;
            w[0] -= eta * g[0];
            w[1] -= eta * g[1];
        }
    }
    let (_, g0) = toy.loss_grad(&w0)?;
    let w2_one = w0[1] - eta * g0[1];

    let cfg = NewtonConfig {
        batch_size: 1,
        cg: CgConfig {
            lambda: 0.0,
            tol: 1e-14,
            ..CgConfig::default()
        },
        ..NewtonConfig::default()
    };
    let mut w = w0.to_vec();
    newton_step(&toy, &mut w, &cfg)?;
    let after_one = [w[0], w[1]];
    let mut steps = 1;
    while (w[0].abs() > eps || w[1].abs() > eps) && steps < 100 {
        newton_step(&toy, &mut w, &cfg)?;
        steps += 1;
    }
    let sys = DenseSystem {
        h: Tensor::from_f64(&[2, 2], &[l1, 0.0, 0.0, l2])?,
        g: g0,
    };
    let d = direct_newton(&sys, 0.0)?;
    Ok(ToyReport {
        kappa: lmax / l1.min(l2),
        eta_bound,
        diverges,
        w1_contraction: c1,
        sgd_iters_closed_form: closed,
        sgd_iters_numeric: numeric,
        w2_after_one_sgd_step: w2_one,
        newton_steps: steps,
        newton_after_one_step: after_one,
        direct_newton_after_one_step: [w0[0] + d[0], w0[1] + d[1]],
    })
}
