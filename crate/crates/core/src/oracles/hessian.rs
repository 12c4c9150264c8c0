use crate::error::{Error, Result};
use crate::hvp::Objective;
use crate::tensor::Tensor;

use super::linalg::{add_diag, lu_solve};

/// Largest active-set size for explicit assembly.
pub const DEFAULT_CAP: usize = 512;

/// An explicit active-set Hessian with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSystem {
    pub h: Tensor<f64>,
    pub g: Vec<f64>,
}

impl DenseSystem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// `max |H − Hᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let m = self.dim();
        let d = self.h.data();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..i {
                worst = worst.max((d[i * m + j] - d[j * m + i]).abs());
            }
        }
        worst
    }

    /// Frobenius norm of `H`.
    pub fn h_norm(&self) -> f64 {
        self.h.sumsq_f64().sqrt()
    }
}

fn check_cap(m: usize, cap: usize) -> Result<()> {
    if m > cap {
        return Err(Error::Config(format!(
            "active set has {m} coordinates, above the explicit-Hessian cap {cap}"
        )));
    }
    Ok(())
}

/// Assembles `H` column by column from exact products with basis vectors.
pub fn brute_hessian<O: Objective<f64> + ?Sized>(obj: &O, x: &[f64], cap: usize) -> Result<DenseSystem> {
    let m = obj.dim();
    check_cap(m, cap)?;
    let (_, g) = obj.loss_grad(x)?;
    let mut h = Tensor::zeros(&[m, m]);
    let mut e = vec![0.0; m];
    for j in 0..m {
        e[j] = 1.0;
        let col = obj.hvp_exact(x, &e)?;
        e[j] = 0.0;
        for (i, v) in col.into_iter().enumerate() {
            h.data_mut()[i * m + j] = v;
        }
    }
    Ok(DenseSystem { h, g })
}

/// Mixed second-order central differences of the loss alone.
pub fn fd_hessian<O: Objective<f64> + ?Sized>(obj: &O, x: &[f64], step: f64, cap: usize) -> Result<Tensor<f64>> {
    let m = obj.dim();
    check_cap(m, cap)?;
    let mut h = Tensor::zeros(&[m, m]);
    let mut p = x.to_vec();
    let mut at = |i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
        p[i] += si * step;
        p[j] += sj * step;
        let l = obj.loss(&p);
        p[i] = x[i];
        p[j] = x[j];
        l
    };
    for i in 0..m {
        for j in 0..=i {
            let v = (at(i, 1.0, j, 1.0)? - at(i, 1.0, j, -1.0)? - at(i, -1.0, j, 1.0)? + at(i, -1.0, j, -1.0)?)
                / (4.0 * step * step);
            h.data_mut()[i * m + j] = v;
            h.data_mut()[j * m + i] = v;
        }
    }
    Ok(h)
}

/// Smallest eigenvalue estimate by power iteration on `σI − A`.
fn smallest_eigenvalue(a: &Tensor<f64>) -> f64 {
    let n = a.shape()[0];
    let d = a.data();
    let sigma = (0..n)
        .map(|i| (0..n).map(|j| d[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    let mut mu = 0.0;
    for _ in 0..500 {
        let mut w: Vec<f64> = (0..n)
            .map(|i| sigma * v[i] - (0..n).map(|j| d[i * n + j] * v[j]).sum::<f64>())
            .collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        mu = nw / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w;
    }
    sigma - mu
}

/// True when `a` admits a Cholesky factorization.
fn is_positive_definite(a: &Tensor<f64>) -> bool {
    let n = a.shape()[0];
    let d = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.5 * (d[i * n + j] + d[j * n + i]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

/// `δ = −(H + λI)⁻¹ g` by dense factorization.
pub fn direct_newton(sys: &DenseSystem, lambda: f64) -> Result<Vec<f64>> {
    let a = add_diag(&sys.h, lambda);
    if !is_positive_definite(&a) {
        return Err(Error::Numerical(format!(
            "H + lambda I is not positive definite (smallest eigenvalue ≈ {:e})",
            smallest_eigenvalue(&a)
        )));
    }
    let neg: Vec<f64> = sys.g.iter().map(|v| -v).collect();
    lu_solve(&a, &neg)
}
