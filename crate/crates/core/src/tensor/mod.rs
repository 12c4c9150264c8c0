//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a contiguous buffer. There are no strided
//! views and no implicit broadcasting: elementwise operations require equal
//! shapes, and only [`Tensor::scale`] mixes a scalar with a tensor. The
//! element type is generic over [`Real`], which covers the two storage
//! dtypes (`f32`, `f64`) and the [`Dual`] numbers used for exact
//! Hessian-vector products. Mixing dtypes is a type error.

mod rng;
mod scalar;

pub use rng::Rng;
pub use scalar::{
    gelu_f64, gelu_grad2_f64, gelu_grad_f64, normal_cdf, normal_pdf, DType, Dual, Real, Scalar,
};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work threshold (multiply-adds) above which `matmul` splits rows across
/// the rayon pool. Every output element is still accumulated sequentially,
/// so results do not depend on the thread count.
const PAR_MATMUL_WORK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    SumSq,
    Max,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor construction (zero-sized dimension)", &shape, &[]));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor construction (shape vs data length)",
                &shape,
                &[data.len()],
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.primal()).collect()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn convert<U: Real>(&self, f: impl Fn(S) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, context: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same(other, context)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v.primal() > 0.0 { v } else { S::zero() })
    }

    pub fn gelu(&self) -> Self {
        self.map(S::gelu)
    }

    /// Single entry point for pointwise operations. Binary ops take exactly
    /// two operands of identical shape; unary ops take one.
    pub fn elementwise(op: Elementwise, args: &[&Self]) -> Result<Self> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Config(format!(
                "{op:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => args[0].add(args[1]),
            Elementwise::Sub => args[0].sub(args[1]),
            Elementwise::Mul => args[0].mul(args[1]),
            Elementwise::Relu => Ok(args[0].relu()),
            Elementwise::Gelu => Ok(args[0].gelu()),
            Elementwise::Scale(s) => Ok(args[0].scale(S::from_f64(s))),
        }
    }

    /// `(m×k)·(k×n)`, accumulating in the element type.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[1] != b.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &b.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![S::zero(); m * n];
        let row = |(i, out_row): (usize, &mut [S])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        };
        if m * n * k >= PAR_MATMUL_WORK && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&self, b: &Self) -> Result<Self> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[1] != b.shape[1] {
            return Err(Error::shape("matmul_nt", &self.shape, &b.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[0]);
        let mut out = vec![S::zero(); m * n];
        let row = |(i, out_row): (usize, &mut [S])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                *o = acc;
            }
        };
        if m * n * k >= PAR_MATMUL_WORK && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `aᵀ·b` for `a: r×m`, `b: r×n`.
    pub fn matmul_tn(&self, b: &Self) -> Result<Self> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[0] != b.shape[0] {
            return Err(Error::shape("matmul_tn", &self.shape, &b.shape));
        }
        let (r, m, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![S::zero(); m * n];
        let row = |(i, out_row): (usize, &mut [S])| {
            for p in 0..r {
                let a = self.data[p * m + i];
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        };
        if m * n * r >= PAR_MATMUL_WORK && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose (rank 2 required)", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(self.data[i * n + j]);
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Full reduction in row-major order.
    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn sumsq(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    /// Reduces over `axes` (removed from the result shape). Accumulation is
    /// sequential in row-major order of the input. `Max` compares primal
    /// values and keeps the first maximum; it rejects an empty axis list.
    pub fn reduce(&self, op: Reduce, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::shape("reduce (invalid axis list)", &self.shape, axes));
            }
            reduced[a] = true;
        }
        if axes.is_empty() && op == Reduce::Max {
            return Err(Error::shape("reduce max over an empty axis set", &self.shape, axes));
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&d| !reduced[d])
            .map(|d| self.shape[d])
            .collect();
        let out_len = numel(&out_shape);
        let mut out: Vec<Option<S>> = vec![None; out_len];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for d in 0..rank {
                if !reduced[d] {
                    o = o * self.shape[d] + idx[d];
                }
            }
            let slot = &mut out[o];
            *slot = Some(match (op, *slot) {
                (Reduce::Sum, None) => v,
                (Reduce::Sum, Some(acc)) => acc + v,
                (Reduce::SumSq, None) => v * v,
                (Reduce::SumSq, Some(acc)) => acc + v * v,
                (Reduce::Max, None) => v,
                (Reduce::Max, Some(acc)) => {
                    if v.primal() > acc.primal() {
                        v
                    } else {
                        acc
                    }
                }
            });
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out.into_iter().map(|v| v.unwrap_or_else(S::zero)).collect(),
        })
    }

    /// Number of entries per index of the leading axis.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape.first().copied().unwrap_or(1)
    }

    /// Gathers entries of the leading (sample) axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("select_rows on a scalar", &self.shape, &[]))?;
        if rows.is_empty() {
            return Err(Error::shape("select_rows with no rows", &self.shape, &[]));
        }
        let len = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("select_rows (row out of range)", &self.shape, &[r]));
            }
            data.extend_from_slice(&self.data[r * len..(r + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat_rows of nothing".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != shape.len() || p.shape[1..] != shape[1..] {
                return Err(Error::shape("concat_rows", &shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn dtype(&self) -> DType {
        S::DTYPE
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Frobenius norm accumulated in `f64`.
    pub fn sumsq_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn lift(&self) -> Tensor<Dual<S>> {
        self.convert(Dual::constant)
    }

    pub fn lift_with(&self, tangent: &Tensor<S>) -> Result<Tensor<Dual<S>>> {
        if self.shape != tangent.shape {
            return Err(Error::shape("dual lift", &self.shape, &tangent.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&tangent.data)
                .map(|(&re, &du)| Dual::new(re, du))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.convert(|v| U::from_f64(v.to_f64()))
    }
}

impl<S: Scalar> Tensor<Dual<S>> {
    pub fn split_dual(&self) -> (Tensor<S>, Tensor<S>) {
        (
            self.convert(|d| d.re),
            self.convert(|d| d.du),
        )
    }
}
