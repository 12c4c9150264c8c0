//! Small dense linear algebra for the oracles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Solves `A x = b` by LU with partial pivoting.
pub fn lu_solve(a: &Tensor<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.shape() != [n, n] {
        return Err(Error::shape("lu_solve", a.shape(), &[n, n]));
    }
    let mut m = a.data().to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[piv * n + col].abs() <= 1e-14 * scale {
            return Err(Error::Numerical(format!("matrix is singular at column {col}")));
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            x[row] -= f * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = x[row];
        for k in row + 1..n {
            s -= m[row * n + k] * x[k];
        }
        x[row] = s / m[row * n + row];
    }
    Ok(x)
}

pub fn matvec(a: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let cols = a.shape()[1];
    a.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

/// `A + λI`.
pub fn add_diag(a: &Tensor<f64>, lambda: f64) -> Tensor<f64> {
    let n = a.shape()[0];
    let mut out = a.clone();
    for i in 0..n {
        out.data_mut()[i * n + i] += lambda;
    }
    out
}
