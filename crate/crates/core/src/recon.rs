//! The K-step reconstruction objective of one layer.
//!
//! `L(Ŵ) = Σ_k ‖Y_k − f_k(X, Ŵ)‖²` summed over samples without a `1/n`
//! factor, where the targets `Y_k` were captured once with dense weights.
//! Points are active-set vectors; see [`ActiveSet`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hvp::{ActiveSet, Objective};
use crate::netgraph::{Activation, SubNetwork};
use crate::tensor::{Rng, Scalar, Tensor};

/// Samples per parallel work item. Fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct ReconstructionTask<T: Scalar = f64> {
    sub: Arc<SubNetwork<T>>,
    active: Arc<ActiveSet>,
    inputs: Activation<T>,
    targets: Vec<Tensor<T>>,
}

/// Deterministic shuffled partition of `0..n` into batches.
pub fn batch_partition(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = Rng::substream(seed, &format!("batches/{epoch}"));
    let perm = rng.permutation(n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

impl<T: Scalar> ReconstructionTask<T> {
    pub fn new(
        sub: Arc<SubNetwork<T>>,
        active: Arc<ActiveSet>,
        inputs: Activation<T>,
        targets: Vec<Tensor<T>>,
    ) -> Result<Self> {
        for (name, mask) in active.names().iter().zip(active.masks()) {
            mask.validate_for(sub.weight(name)?.shape())?;
        }
        if targets.len() != sub.horizon() + 1 {
            return Err(Error::Config(format!(
                "{} target tensors for horizon K = {}",
                targets.len(),
                sub.horizon()
            )));
        }
        let n = inputs.samples();
        if let Some(t) = targets.iter().find(|t| t.shape()[0] != n) {
            return Err(Error::shape("reconstruction targets", t.shape(), &[n]));
        }
        Ok(ReconstructionTask {
            sub,
            active,
            inputs,
            targets,
        })
    }

    /// Records dense targets from the sub-network's stored weights.
    pub fn capture(sub: Arc<SubNetwork<T>>, active: Arc<ActiveSet>, inputs: Activation<T>) -> Result<Self> {
        let targets = sub.forward_capture(&inputs, &[])?;
        Self::new(sub, active, inputs, targets)
    }

    pub fn sub(&self) -> &SubNetwork<T> {
        &self.sub
    }

    pub fn active(&self) -> &ActiveSet {
        &self.active
    }

    pub fn inputs(&self) -> &Activation<T> {
        &self.inputs
    }

    pub fn targets(&self) -> &[Tensor<T>] {
        &self.targets
    }

    pub fn samples(&self) -> usize {
        self.inputs.samples()
    }

    /// Active coordinates of the dense weights, i.e. of `W ⊙ Z`.
    pub fn initial_point(&self) -> Result<Vec<T>> {
        let blocks: Vec<Tensor<T>> = self
            .active
            .names()
            .iter()
            .map(|n| self.sub.weight(n).cloned())
            .collect::<Result<_>>()?;
        self.active.gather(&blocks)
    }

    /// Full-shaped weights for an active vector.
    pub fn weights_at(&self, x: &[T]) -> Result<Vec<Tensor<T>>> {
        self.active.scatter(x)
    }

    /// The task restricted to the given sample rows.
    pub fn view(&self, rows: &[usize]) -> Result<Self> {
        Ok(ReconstructionTask {
            sub: self.sub.clone(),
            active: self.active.clone(),
            inputs: self.inputs.select_rows(rows)?,
            targets: self
                .targets
                .iter()
                .map(|t| t.select_rows(rows))
                .collect::<Result<_>>()?,
        })
    }

    pub fn batch_view(&self, batch_index: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Self> {
        let parts = batch_partition(self.samples(), batch_size, seed, epoch)?;
        let rows = parts.get(batch_index).ok_or_else(|| {
            Error::Config(format!("batch {batch_index} out of range ({} batches)", parts.len()))
        })?;
        self.view(rows)
    }

    fn overrides<'a>(&'a self, blocks: &'a [Tensor<T>]) -> Vec<(&'a str, &'a Tensor<T>)> {
        self.active
            .names()
            .iter()
            .map(String::as_str)
            .zip(blocks.iter())
            .collect()
    }

    fn chunks(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.samples();
        (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect()
    }

    fn map_chunks<R: Send>(
        &self,
        f: impl Fn(&Activation<T>, &[Tensor<T>]) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        let ranges = self.chunks();
        if ranges.len() == 1 {
            return Ok(vec![f(&self.inputs, &self.targets)?]);
        }
        ranges
            .into_par_iter()
            .map(|r| {
                let rows: Vec<usize> = r.collect();
                let x = self.inputs.select_rows(&rows)?;
                let ys: Vec<Tensor<T>> = self
                    .targets
                    .iter()
                    .map(|t| t.select_rows(&rows))
                    .collect::<Result<_>>()?;
                f(&x, &ys)
            })
            .collect()
    }

    /// Loss at full-shaped weights, which must already be masked.
    pub fn loss_full(&self, blocks: &[Tensor<T>]) -> Result<f64> {
        for ((name, mask), t) in self.active.names().iter().zip(self.active.masks()).zip(blocks) {
            if !mask.holds_on(t) {
                return Err(Error::Mask(format!(
                    "weight `{name}` has non-zero entries at masked positions"
                )));
            }
        }
        let ov = self.overrides(blocks);
        Ok(self
            .map_chunks(|x, ys| self.sub.loss(x, ys, &ov))?
            .into_iter()
            .sum())
    }

    /// `‖Y_k − ŷ_k‖²` for each k.
    pub fn per_k_losses(&self, x: &[T]) -> Result<Vec<f64>> {
        let blocks = self.weights_at(x)?;
        let ov = self.overrides(&blocks);
        let parts = self.map_chunks(|inp, ys| {
            let caps = self.sub.forward_capture(inp, &ov)?;
            Ok(caps
                .iter()
                .zip(ys)
                .map(|(c, y)| {
                    c.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
                        .sum::<f64>()
                })
                .collect::<Vec<f64>>())
        })?;
        let mut out = vec![0.0; self.targets.len()];
        for p in parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }

    fn sum_grads(&self, parts: Vec<BTreeMap<String, Tensor<T>>>) -> Result<Vec<T>> {
        let mut blocks: Vec<Tensor<T>> = Vec::with_capacity(self.active.names().len());
        for (i, name) in self.active.names().iter().enumerate() {
            let mut acc = Tensor::zeros(self.active.masks()[i].shape());
            for p in &parts {
                if let Some(g) = p.get(name) {
                    acc.add_assign(g)?;
                }
            }
            blocks.push(acc);
        }
        self.active.gather(&blocks)
    }
}

impl<T: Scalar> Objective<T> for ReconstructionTask<T> {
    fn dim(&self) -> usize {
        self.active.len()
    }

    fn loss(&self, x: &[T]) -> Result<f64> {
        let blocks = self.weights_at(x)?;
        let ov = self.overrides(&blocks);
        Ok(self
            .map_chunks(|inp, ys| self.sub.loss(inp, ys, &ov))?
            .into_iter()
            .sum())
    }

    fn loss_grad(&self, x: &[T]) -> Result<(f64, Vec<T>)> {
        let blocks = self.weights_at(x)?;
        let ov = self.overrides(&blocks);
        let names: Vec<&str> = self.active.names().iter().map(String::as_str).collect();
        let parts = self.map_chunks(|inp, ys| self.sub.loss_grad(inp, ys, &ov, &names))?;
        let loss = parts.iter().map(|p| p.0).sum();
        let grad = self.sum_grads(parts.into_iter().map(|p| p.1).collect())?;
        Ok((loss, grad))
    }

    fn hvp_exact(&self, x: &[T], v: &[T]) -> Result<Vec<T>> {
        let blocks = self.weights_at(x)?;
        let dirs = self.active.scatter(v)?;
        let ov = self.overrides(&blocks);
        let dv = self.overrides(&dirs);
        let parts = self.map_chunks(|inp, ys| Ok(self.sub.hvp(inp, ys, &ov, &dv)?.2))?;
        self.sum_grads(parts)
    }
}
