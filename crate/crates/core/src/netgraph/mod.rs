//! Network graphs: a JSON manifest of ops plus named weight tensors.
//!
//! ```
//! use snows::netgraph::{Manifest, NetworkGraph};
//! use snows::Tensor;
//! use std::collections::BTreeMap;
//!
//! let manifest = Manifest::from_json(r#"{
//!     "input_shape": [3],
//!     "weights": {"w": [3, 2]},
//!     "prunable": ["w"],
//!     "ops": [{"kind": "dense", "weight": "w", "target": true}, {"kind": "relu"}]
//! }"#).unwrap();
//! let mut weights = BTreeMap::new();
//! weights.insert("w".to_string(), Tensor::<f64>::ones(&[3, 2]));
//! let net = NetworkGraph::new(manifest, weights).unwrap();
//! let y = net.forward(&Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
//! assert_eq!(y.data(), &[0.0, 0.0]);
//! ```

mod kernels;
mod manifest;
mod window;

use std::collections::BTreeMap;

pub use manifest::{Manifest, Op, OpSpec};
pub use window::Activation;

use crate::error::{Error, Result};
use crate::tensor::{Dual, Real, Scalar, Tensor};
use window::{Overlay, Window};

/// A validated manifest together with its weights.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T: Scalar = f64> {
    manifest: Manifest,
    weights: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn new(manifest: Manifest, weights: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        manifest.validate()?;
        for (name, shape) in &manifest.weights {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::Manifest(format!("weight `{name}` has no tensor")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("weight `{name}`"), t.shape(), shape));
            }
        }
        if let Some(extra) = weights.keys().find(|k| !manifest.weights.contains_key(*k)) {
            return Err(Error::Manifest(format!("tensor `{extra}` is not declared in the manifest")));
        }
        Ok(NetworkGraph { manifest, weights })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("weight `{name}` is not declared")))
    }

    pub fn num_ops(&self) -> usize {
        self.manifest.ops.len()
    }

    /// Swaps in a new value for `name`, returning the old one. The shape
    /// must match; on error nothing changes.
    pub fn replace_weight(&mut self, name: &str, value: Tensor<T>) -> Result<Tensor<T>> {
        let slot = self
            .weights
            .get_mut(name)
            .ok_or_else(|| Error::Manifest(format!("weight `{name}` is not declared")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!("replacement for `{name}`"), value.shape(), slot.shape()));
        }
        Ok(std::mem::replace(slot, value))
    }

    /// Wraps a batch `(n, …input_shape)` as the graph's initial state.
    pub fn input(&self, x: &Tensor<T>) -> Result<Activation<T>> {
        if x.shape().len() != self.manifest.input_shape.len() + 1
            || x.shape()[1..] != self.manifest.input_shape[..]
        {
            let mut want = vec![x.shape().first().copied().unwrap_or(1)];
            want.extend(&self.manifest.input_shape);
            return Err(Error::shape("network input", x.shape(), &want));
        }
        Ok(Activation::new(x.clone()))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _) = self.forward_range(self.input(x)?, 0, self.num_ops(), &[])?;
        Ok(out.x)
    }

    /// Runs ops `start..end` from `state`, also returning the outputs of
    /// the ops listed in `capture`.
    pub fn forward_range(
        &self,
        state: Activation<T>,
        start: usize,
        end: usize,
        capture: &[usize],
    ) -> Result<(Activation<T>, Vec<Tensor<T>>)> {
        if start > end || end > self.num_ops() {
            return Err(Error::Config(format!(
                "op range {start}..{end} is outside 0..{}",
                self.num_ops()
            )));
        }
        let win = Window::new(&self.manifest.ops[start..end], start);
        let (out, caps, _) = win.forward(&self.weights, state, capture, false)?;
        Ok((out, caps))
    }

    /// Full forward pass, a caller-supplied loss on the output, then the
    /// gradient of that loss for every name in `wanted`.
    pub fn backprop(
        &self,
        x: &Tensor<T>,
        wanted: &[&str],
        loss: impl FnOnce(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        let n = self.num_ops();
        let win = Window::new(&self.manifest.ops, 0);
        let (out, _, trace) = win.forward(&self.weights, self.input(x)?, &[], true)?;
        let (value, seed) = loss(&out.x)?;
        let back = win.backward(&self.weights, trace.unwrap(), vec![(n - 1, seed)], wanted)?;
        Ok((value, back))
    }

    /// Number of target ops strictly after `start`.
    pub fn k_max(&self, start: usize) -> usize {
        self.manifest.ops[start + 1..].iter().filter(|s| s.target).count()
    }

    pub fn sub_network(&self, start: usize, k: usize) -> Result<SubNetwork<T>> {
        SubNetwork::new(self, start, k)
    }

    /// Attention probabilities `(n, heads, seq, seq)` of the `attention_qkv`
    /// op at index `op` for the batch `x`.
    pub fn attention_probs(&self, x: &Tensor<T>, op: usize) -> Result<Tensor<T>> {
        let Some(OpSpec {
            op: Op::AttentionQkv {
                wq,
                wk,
                wv,
                heads,
                head_dim,
            },
            ..
        }) = self.manifest.ops.get(op)
        else {
            return Err(Error::Config(format!("op {op} is not an attention_qkv op")));
        };
        let (state, _) = self.forward_range(self.input(x)?, 0, op, &[])?;
        kernels::attention_probs(&state.x, &self.weights[wq], &self.weights[wk], &self.weights[wv], *heads, *head_dim)
    }
}

/// The window of ops from one layer to its K-th downstream target, with a
/// private copy of the weights it reads.
///
/// Targets are the layer's own output followed by the outputs of the next
/// `min(K, K_max)` ops flagged `target`.
#[derive(Debug, Clone)]
pub struct SubNetwork<T: Scalar = f64> {
    start: usize,
    requested: usize,
    targets: Vec<usize>,
    ops: Vec<OpSpec>,
    weights: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SubNetwork<T> {
    pub fn new(graph: &NetworkGraph<T>, start: usize, k: usize) -> Result<Self> {
        if start >= graph.num_ops() {
            return Err(Error::Config(format!(
                "layer op {start} is outside the graph ({} ops)",
                graph.num_ops()
            )));
        }
        let mut targets = vec![start];
        targets.extend(
            graph.manifest.ops[start + 1..]
                .iter()
                .enumerate()
                .filter(|(_, s)| s.target)
                .map(|(i, _)| start + 1 + i)
                .take(k),
        );
        let end = *targets.last().unwrap() + 1;
        let ops = graph.manifest.ops[start..end].to_vec();
        let mut weights = BTreeMap::new();
        for spec in &ops {
            for w in spec.op.weight_names() {
                weights.insert(w.to_string(), graph.weights[w].clone());
            }
        }
        Ok(SubNetwork {
            start,
            requested: k,
            targets,
            ops,
            weights,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// One past the last op in the window.
    pub fn end(&self) -> usize {
        self.start + self.ops.len()
    }

    pub fn requested_horizon(&self) -> usize {
        self.requested
    }

    /// `K(ℓ) = min(K, K_max)`.
    pub fn horizon(&self) -> usize {
        self.targets.len() - 1
    }

    /// Absolute op indices whose outputs are reconstructed (`k = 0..=K(ℓ)`).
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn ops(&self) -> &[OpSpec] {
        &self.ops
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights.get(name).ok_or_else(|| {
            Error::Config(format!(
                "weight `{name}` is not read by ops {}..{}",
                self.start,
                self.end()
            ))
        })
    }

    fn window(&self) -> Window<'_> {
        Window::new(&self.ops, self.start)
    }

    fn check_overrides(&self, overrides: &[(&str, &Tensor<T>)]) -> Result<()> {
        for (name, t) in overrides {
            let w = self.weight(name)?;
            if w.shape() != t.shape() {
                return Err(Error::shape(format!("override for `{name}`"), t.shape(), w.shape()));
            }
        }
        Ok(())
    }

    fn check_targets<S>(&self, targets: &[Tensor<S>]) -> Result<()> {
        if targets.len() != self.targets.len() {
            return Err(Error::Config(format!(
                "expected {} target tensors, got {}",
                self.targets.len(),
                targets.len()
            )));
        }
        Ok(())
    }

    /// Outputs at every target op, with the stored weights except those in
    /// `overrides`.
    pub fn forward_capture(
        &self,
        input: &Activation<T>,
        overrides: &[(&str, &Tensor<T>)],
    ) -> Result<Vec<Tensor<T>>> {
        self.check_overrides(overrides)?;
        let ws = Overlay {
            base: &self.weights,
            overrides,
        };
        let (_, caps, _) = self.window().forward(&ws, input.clone(), &self.targets, false)?;
        Ok(caps)
    }

    /// `Σ_k ‖ŷ_k − Y_k‖²_F`, accumulated in f64.
    pub fn loss(
        &self,
        input: &Activation<T>,
        targets: &[Tensor<T>],
        overrides: &[(&str, &Tensor<T>)],
    ) -> Result<f64> {
        self.check_targets(targets)?;
        let caps = self.forward_capture(input, overrides)?;
        let mut total = 0.0;
        for (y, t) in caps.iter().zip(targets) {
            total += residual_sumsq(y, t)?;
        }
        Ok(total)
    }

    /// Loss and its gradient with respect to every weight in `wanted`.
    pub fn loss_grad(
        &self,
        input: &Activation<T>,
        targets: &[Tensor<T>],
        overrides: &[(&str, &Tensor<T>)],
        wanted: &[&str],
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        self.check_targets(targets)?;
        self.check_overrides(overrides)?;
        for w in wanted {
            self.weight(w)?;
        }
        let ws = Overlay {
            base: &self.weights,
            overrides,
        };
        let (loss, back) = recon_backprop(self.window(), &ws, input.clone(), &self.targets, targets, wanted)?;
        Ok((loss, back))
    }

    /// Gradient of the loss with respect to the single weight `w_name`.
    pub fn grad_wrt_layer(
        &self,
        targets: &[Tensor<T>],
        w_name: &str,
        input: &Activation<T>,
    ) -> Result<Tensor<T>> {
        let (_, mut g) = self.loss_grad(input, targets, &[], &[w_name])?;
        Ok(g.remove(w_name)
            .unwrap_or_else(|| Tensor::zeros(self.weights[w_name].shape())))
    }

    /// Exact Hessian-vector product of the loss, forward-over-reverse: the
    /// reverse sweep runs on dual numbers whose tangent along each weight in
    /// `direction` is the given vector. Returns `(loss, ∇L, ∇²L·v)` for the
    /// direction's weights.
    #[allow(clippy::type_complexity)]
    pub fn hvp(
        &self,
        input: &Activation<T>,
        targets: &[Tensor<T>],
        point: &[(&str, &Tensor<T>)],
        direction: &[(&str, &Tensor<T>)],
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>, BTreeMap<String, Tensor<T>>)> {
        self.check_targets(targets)?;
        self.check_overrides(point)?;
        self.check_overrides(direction)?;
        let mut lifted: BTreeMap<String, Tensor<Dual<T>>> = BTreeMap::new();
        for (name, base) in &self.weights {
            let value = point
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| *t)
                .unwrap_or(base);
            let t = match direction.iter().find(|(n, _)| n == name) {
                Some((_, v)) => value.lift_with(v)?,
                None => value.lift(),
            };
            lifted.insert(name.clone(), t);
        }
        let wanted: Vec<&str> = direction.iter().map(|(n, _)| *n).collect();
        let targets_d: Vec<Tensor<Dual<T>>> = targets.iter().map(Tensor::lift).collect();
        let (loss, back) = recon_backprop(
            self.window(),
            &lifted,
            input.convert(Dual::constant),
            &self.targets,
            &targets_d,
            &wanted,
        )?;
        let mut grads = BTreeMap::new();
        let mut hv = BTreeMap::new();
        for (name, t) in back {
            let (g, h) = t.split_dual();
            grads.insert(name.clone(), g);
            hv.insert(name, h);
        }
        Ok((loss, grads, hv))
    }
}

fn residual_sumsq<S: Real>(y: &Tensor<S>, t: &Tensor<S>) -> Result<f64> {
    if y.shape() != t.shape() {
        return Err(Error::shape("reconstruction target", t.shape(), y.shape()));
    }
    Ok(y.data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| {
            let d = a.primal() - b.primal();
            d * d
        })
        .sum())
}

fn recon_backprop<S: Real>(
    win: Window<'_>,
    ws: &dyn window::WeightSource<S>,
    input: Activation<S>,
    capture: &[usize],
    targets: &[Tensor<S>],
    wanted: &[&str],
) -> Result<(f64, BTreeMap<String, Tensor<S>>)> {
    let (_, caps, trace) = win.forward(ws, input, capture, true)?;
    let two = S::from_f64(2.0);
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(caps.len());
    for ((y, t), &idx) in caps.iter().zip(targets).zip(capture) {
        loss += residual_sumsq(y, t)?;
        seeds.push((idx, y.zip_map(t, "residual", |a, b| two * (a - b))?));
    }
    let back = win.backward(ws, trace.unwrap(), seeds, wanted)?;
    Ok((loss, back))
}

#[cfg(test)]
mod tests;
