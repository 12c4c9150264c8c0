//! Active-set Hessian-vector products and the damped CG solver.
//!
//! The solver works on flat vectors over the active (unmasked) weights only,
//! in ascending flat-index order, so it never forms the Hessian.
//!
//! ```
//! use snows::hvp::{cg_solve, CgConfig};
//!
//! // (diag(1, 4) + 0·I) δ = −g
//! let h = |v: &[f64]| Ok(vec![v[0], 4.0 * v[1]]);
//! let cfg = CgConfig { lambda: 0.0, tol: 1e-12, ..CgConfig::default() };
//! let report = cg_solve(h, &[1.0, 2.0], &cfg).unwrap();
//! assert_eq!(report.iters, 2);
//! assert!((report.delta[1] + 0.5).abs() < 1e-12);
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::{Scalar, Tensor};

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// `y ← y + α·x`.
pub fn axpy<T: Scalar>(alpha: f64, x: &[T], y: &mut [T]) {
    let a = T::from_f64(alpha);
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// The active coordinates of a group of weights pruned together, e.g. the
/// Q, K and V projections of one attention op.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    names: Vec<String>,
    masks: Vec<Mask>,
    index: Vec<Vec<usize>>,
    len: usize,
}

impl ActiveSet {
    pub fn new(names: Vec<String>, masks: Vec<Mask>) -> Result<Self> {
        if names.is_empty() || names.len() != masks.len() {
            return Err(Error::Config(format!(
                "{} weight names for {} masks",
                names.len(),
                masks.len()
            )));
        }
        let index: Vec<Vec<usize>> = masks.iter().map(Mask::active).collect();
        let len = index.iter().map(Vec::len).sum();
        Ok(ActiveSet {
            names,
            masks,
            index,
            len,
        })
    }

    /// Number of active coordinates `m`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    /// Active entries of each block, concatenated in block order.
    pub fn gather<T: Scalar>(&self, blocks: &[Tensor<T>]) -> Result<Vec<T>> {
        if blocks.len() != self.masks.len() {
            return Err(Error::Config(format!(
                "expected {} weight blocks, got {}",
                self.masks.len(),
                blocks.len()
            )));
        }
        let mut out = Vec::with_capacity(self.len);
        for ((t, mask), idx) in blocks.iter().zip(&self.masks).zip(&self.index) {
            if t.shape() != mask.shape() {
                return Err(Error::shape("gather", t.shape(), mask.shape()));
            }
            out.extend(idx.iter().map(|&i| t.data()[i]));
        }
        Ok(out)
    }

    /// Writes `v` back into full-shaped zero tensors.
    pub fn scatter<T: Scalar>(&self, v: &[T]) -> Result<Vec<Tensor<T>>> {
        if v.len() != self.len {
            return Err(Error::Config(format!(
                "active vector has length {}, expected {}",
                v.len(),
                self.len
            )));
        }
        let mut rest = v;
        let mut out = Vec::with_capacity(self.masks.len());
        for (mask, idx) in self.masks.iter().zip(&self.index) {
            let (head, tail) = rest.split_at(idx.len());
            let mut t = Tensor::zeros(mask.shape());
            for (&i, &x) in idx.iter().zip(head) {
                t.data_mut()[i] = x;
            }
            out.push(t);
            rest = tail;
        }
        Ok(out)
    }
}

/// A smooth objective over an active-set vector.
pub trait Objective<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, x: &[T]) -> Result<f64>;
    fn loss_grad(&self, x: &[T]) -> Result<(f64, Vec<T>)>;
    /// `∇²L(x)·v`, exactly.
    fn hvp_exact(&self, x: &[T], v: &[T]) -> Result<Vec<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HvpMode {
    Exact,
    /// Forward difference of gradients with step `eps0 / ‖v‖`.
    FiniteDiff { eps0: f64 },
}

/// Hessian-vector product at `x`; `g` must be the gradient at `x` (used by
/// the finite-difference mode).
pub fn hvp<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &[T],
    v: &[T],
    g: &[T],
    mode: HvpMode,
) -> Result<Vec<T>> {
    if v.len() != obj.dim() || x.len() != obj.dim() {
        return Err(Error::Config(format!(
            "hvp vectors have lengths {}/{}, expected {}",
            x.len(),
            v.len(),
            obj.dim()
        )));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![T::zero(); v.len()]);
    }
    let out = match mode {
        HvpMode::Exact => obj.hvp_exact(x, v)?,
        HvpMode::FiniteDiff { eps0 } => {
            let eps = eps0 / vn;
            let mut xe = x.to_vec();
            axpy(eps, v, &mut xe);
            let (_, ge) = obj.loss_grad(&xe)?;
            let inv = T::from_f64(1.0 / eps);
            ge.iter().zip(g).map(|(&a, &b)| (a - b) * inv).collect()
        }
    };
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "Hessian-vector product has a non-finite entry at active index {i} (‖v‖ = {vn:e})"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    /// Residual-norm threshold.
    pub tol: f64,
    /// Scale `tol` by `‖g‖`.
    pub relative: bool,
    pub max_iters: usize,
    /// Levenberg–Marquardt damping.
    pub lambda: f64,
    /// Finite-difference step; `0` selects exact products.
    pub eps_fd: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            tol: 1e-3,
            relative: false,
            max_iters: 100,
            lambda: 1e-4,
            eps_fd: 0.0,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("cg tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("cg max_iters must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.eps_fd >= 0.0) {
            return Err(Error::Config(format!("eps_fd must be non-negative, got {}", self.eps_fd)));
        }
        Ok(())
    }

    pub fn mode(&self) -> HvpMode {
        if self.eps_fd == 0.0 {
            HvpMode::Exact
        } else {
            HvpMode::FiniteDiff { eps0: self.eps_fd }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport<T = f64> {
    pub delta: Vec<T>,
    pub iters: usize,
    pub residual_norm: f64,
    pub hvp_calls: usize,
    /// `(iteration, ‖r‖)`, starting with iteration 0.
    pub trace: Vec<(usize, f64)>,
}

impl<T> CgReport<T> {
    pub fn write_trace_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iteration,residual_norm")?;
        for (i, r) in &self.trace {
            writeln!(out, "{i},{r:e}")?;
        }
        Ok(())
    }
}

/// Approximately solves `(H + λI) δ = −g` with `H` supplied as a product.
pub fn cg_solve<T: Scalar>(
    mut h: impl FnMut(&[T]) -> Result<Vec<T>>,
    g: &[T],
    cfg: &CgConfig,
) -> Result<CgReport<T>> {
    cfg.validate()?;
    let m = g.len();
    let threshold = if cfg.relative { cfg.tol * norm(g) } else { cfg.tol };
    let mut delta = vec![T::zero(); m];
    let mut r: Vec<T> = g.iter().map(|&v| -v).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iters = 0;
    let mut trace = vec![(0, rr.sqrt())];
    while rr.sqrt() >= threshold && iters < cfg.max_iters {
        let mut bp = h(&p)?;
        if bp.len() != m {
            return Err(Error::Numerical(format!(
                "Hessian product returned {} entries, expected {m}",
                bp.len()
            )));
        }
        axpy(cfg.lambda, &p, &mut bp);
        let curv = dot(&p, &bp);
        iters += 1;
        if !(curv > 0.0) {
            return Err(Error::Curvature {
                value: curv,
                iteration: iters,
            });
        }
        let eta = rr / curv;
        axpy(eta, &p, &mut delta);
        axpy(-eta, &bp, &mut r);
        let rr_new = dot(&r, &r);
        let beta = T::from_f64(rr_new / rr);
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
        trace.push((iters, rr.sqrt()));
    }
    Ok(CgReport {
        delta,
        iters,
        residual_norm: rr.sqrt(),
        hvp_calls: iters,
        trace,
    })
}
