//! Forward/reverse evaluation over a contiguous slice of ops.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, Saved};
use super::manifest::{residual_pairs, Op, OpSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lookup of weight tensors by name.
pub(crate) trait WeightSource<S> {
    fn weight(&self, name: &str) -> Option<&Tensor<S>>;
}

impl<S> WeightSource<S> for BTreeMap<String, Tensor<S>> {
    fn weight(&self, name: &str) -> Option<&Tensor<S>> {
        self.get(name)
    }
}

/// A base store with a few names replaced.
pub(crate) struct Overlay<'a, S> {
    pub base: &'a BTreeMap<String, Tensor<S>>,
    pub overrides: &'a [(&'a str, &'a Tensor<S>)],
}

impl<S> WeightSource<S> for Overlay<'_, S> {
    fn weight(&self, name: &str) -> Option<&Tensor<S>> {
        self.overrides
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .or_else(|| self.base.get(name))
    }
}

/// The data flowing between ops: the current activation plus the values
/// saved by still-open `residual_begin` ops (innermost last).
#[derive(Debug, Clone, PartialEq)]
pub struct Activation<S = f64> {
    pub x: Tensor<S>,
    pub skips: Vec<Tensor<S>>,
}

impl<S: Real> Activation<S> {
    pub fn new(x: Tensor<S>) -> Self {
        Activation {
            x,
            skips: Vec::new(),
        }
    }

    pub fn samples(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Activation {
            x: self.x.select_rows(rows)?,
            skips: self
                .skips
                .iter()
                .map(|s| s.select_rows(rows))
                .collect::<Result<_>>()?,
        })
    }

    pub fn convert<U: Real>(&self, f: impl Fn(S) -> U + Copy) -> Activation<U> {
        Activation {
            x: self.x.convert(f),
            skips: self.skips.iter().map(|s| s.convert(f)).collect(),
        }
    }
}

pub(crate) struct Trace<S> {
    saved: Vec<Saved<S>>,
    pairs: Vec<Option<usize>>,
}

#[derive(Clone, Copy)]
pub(crate) struct Window<'a> {
    pub ops: &'a [OpSpec],
    /// Absolute index of `ops[0]` in the full graph.
    pub base: usize,
}

fn fetch<'w, S>(ws: &'w dyn WeightSource<S>, name: &str, index: usize, op: &Op) -> Result<&'w Tensor<S>> {
    ws.weight(name).ok_or_else(|| Error::Op {
        index,
        kind: op.kind(),
        message: format!("weight `{name}` is missing"),
    })
}

fn bn_params<S: Real>(
    ws: &dyn WeightSource<S>,
    index: usize,
    op: &Op,
) -> Result<(Vec<S>, Vec<S>)> {
    let Op::BatchnormAffine {
        gamma,
        beta,
        mean,
        var,
        eps,
    } = op
    else {
        unreachable!()
    };
    let g = fetch(ws, gamma, index, op)?;
    let b = fetch(ws, beta, index, op)?;
    let m = fetch(ws, mean, index, op)?;
    let v = fetch(ws, var, index, op)?;
    let mut scale = Vec::with_capacity(g.numel());
    let mut shift = Vec::with_capacity(g.numel());
    for c in 0..g.numel() {
        let s = g.data()[c].primal() / (v.data()[c].primal() + eps).sqrt();
        scale.push(S::from_f64(s));
        shift.push(S::from_f64(b.data()[c].primal() - m.data()[c].primal() * s));
    }
    Ok((scale, shift))
}

impl<'a> Window<'a> {
    pub fn new(ops: &'a [OpSpec], base: usize) -> Self {
        Window { ops, base }
    }

    fn wrap(&self, rel: usize, e: Error) -> Error {
        match e {
            Error::Op { .. } => e,
            other => Error::Op {
                index: self.base + rel,
                kind: self.ops[rel].op.kind(),
                message: other.to_string(),
            },
        }
    }

    /// Runs every op, returning the final activation and copies of the
    /// outputs at `capture` (absolute indices, ascending).
    pub fn forward<S: Real>(
        &self,
        ws: &dyn WeightSource<S>,
        input: Activation<S>,
        capture: &[usize],
        keep_trace: bool,
    ) -> Result<(Activation<S>, Vec<Tensor<S>>, Option<Trace<S>>)> {
        let Activation { mut x, mut skips } = input;
        let mut captured = Vec::with_capacity(capture.len());
        let mut saved = Vec::with_capacity(if keep_trace { self.ops.len() } else { 0 });
        for (rel, spec) in self.ops.iter().enumerate() {
            let (y, s) = self
                .step(ws, rel, &spec.op, x, &mut skips)
                .map_err(|e| self.wrap(rel, e))?;
            x = y;
            if capture.contains(&(self.base + rel)) {
                captured.push(x.clone());
            }
            if keep_trace {
                saved.push(s);
            }
        }
        let trace = if keep_trace {
            Some(Trace {
                saved,
                pairs: residual_pairs(self.ops, self.base, false)?,
            })
        } else {
            None
        };
        Ok((Activation { x, skips }, captured, trace))
    }

    fn step<S: Real>(
        &self,
        ws: &dyn WeightSource<S>,
        rel: usize,
        op: &Op,
        x: Tensor<S>,
        skips: &mut Vec<Tensor<S>>,
    ) -> Result<(Tensor<S>, Saved<S>)> {
        let index = self.base + rel;
        Ok(match op {
            Op::Dense { weight, bias } | Op::AttentionOut { weight, bias } => {
                let w = fetch(ws, weight, index, op)?;
                let b = bias.as_deref().map(|b| fetch(ws, b, index, op)).transpose()?;
                let y = kernels::dense_forward(&x, w, b)?;
                (y, Saved::Input(x))
            }
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let w = fetch(ws, weight, index, op)?;
                let b = bias.as_deref().map(|b| fetch(ws, b, index, op)).transpose()?;
                kernels::conv_forward(&x, w, b, *stride, *padding)?
            }
            Op::Relu => (x.relu(), Saved::Input(x)),
            Op::Gelu => (x.gelu(), Saved::Input(x)),
            Op::BatchnormAffine { .. } => {
                let (scale, shift) = bn_params(ws, index, op)?;
                (kernels::channel_affine(&x, &scale, &shift)?, Saved::None)
            }
            Op::ResidualBegin => {
                skips.push(x.clone());
                (x, Saved::None)
            }
            Op::ResidualAdd => {
                let skip = skips.pop().ok_or_else(|| Error::Op {
                    index,
                    kind: op.kind(),
                    message: "no open residual branch".into(),
                })?;
                (x.add(&skip)?, Saved::None)
            }
            Op::Avgpool { kernel, stride } => {
                let y = kernels::avgpool_forward(&x, *kernel, *stride)?;
                (y, Saved::Shape(x.shape().to_vec()))
            }
            Op::Maxpool { kernel, stride } => kernels::maxpool_forward(&x, *kernel, *stride)?,
            Op::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let rest = x.numel() / n;
                (x.reshape(&[n, rest])?, Saved::Shape(shape))
            }
            Op::Softmax => {
                let y = kernels::softmax_forward(&x);
                let p = y.clone();
                (y, Saved::Probs(p))
            }
            Op::AttentionQkv {
                wq,
                wk,
                wv,
                heads,
                head_dim,
            } => kernels::attention_forward(
                &x,
                fetch(ws, wq, index, op)?,
                fetch(ws, wk, index, op)?,
                fetch(ws, wv, index, op)?,
                *heads,
                *head_dim,
            )?,
        })
    }

    /// Reverse sweep. `seeds` adds `∂L/∂y` at absolute op indices; returns
    /// the gradient for every weight in `wanted`.
    pub fn backward<S: Real>(
        &self,
        ws: &dyn WeightSource<S>,
        trace: Trace<S>,
        seeds: Vec<(usize, Tensor<S>)>,
        wanted: &[&str],
    ) -> Result<BTreeMap<String, Tensor<S>>> {
        let mut seeds: HashMap<usize, Tensor<S>> = seeds.into_iter().try_fold(
            HashMap::new(),
            |mut acc: HashMap<usize, Tensor<S>>, (i, t)| -> Result<_> {
                match acc.get_mut(&i) {
                    Some(prev) => prev.add_assign(&t)?,
                    None => {
                        acc.insert(i, t);
                    }
                }
                Ok(acc)
            },
        )?;
        let Trace { mut saved, pairs } = trace;
        let mut grads: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        let mut skip_grads: HashMap<usize, Tensor<S>> = HashMap::new();
        let mut g: Option<Tensor<S>> = None;
        for rel in (0..self.ops.len()).rev() {
            if let Some(seed) = seeds.remove(&(self.base + rel)) {
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&seed).map_err(|e| self.wrap(rel, e))?;
                        acc
                    }
                    None => seed,
                });
            }
            let Some(gy) = g.take() else { continue };
            let need_x = rel > 0;
            let saved_rel = std::mem::replace(&mut saved[rel], Saved::None);
            g = self
                .step_back(ws, rel, saved_rel, gy, need_x, wanted, &mut grads, &pairs, &mut skip_grads)
                .map_err(|e| self.wrap(rel, e))?;
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_back<S: Real>(
        &self,
        ws: &dyn WeightSource<S>,
        rel: usize,
        saved: Saved<S>,
        gy: Tensor<S>,
        need_x: bool,
        wanted: &[&str],
        grads: &mut BTreeMap<String, Tensor<S>>,
        pairs: &[Option<usize>],
        skip_grads: &mut HashMap<usize, Tensor<S>>,
    ) -> Result<Option<Tensor<S>>> {
        let index = self.base + rel;
        let op = &self.ops[rel].op;
        let mut put = |name: &str, t: Option<Tensor<S>>| -> Result<()> {
            if let Some(t) = t {
                match grads.get_mut(name) {
                    Some(acc) => acc.add_assign(&t)?,
                    None => {
                        grads.insert(name.to_string(), t);
                    }
                }
            }
            Ok(())
        };
        let wants = |name: &str| wanted.contains(&name);
        Ok(match (op, saved) {
            (Op::Dense { weight, bias } | Op::AttentionOut { weight, bias }, Saved::Input(x)) => {
                let w = fetch(ws, weight, index, op)?;
                let want_b = bias.as_deref().is_some_and(wants);
                let r = kernels::dense_backward(&x, w, &gy, [need_x, wants(weight), want_b])?;
                put(weight, r.w)?;
                if let Some(b) = bias {
                    put(b, r.b)?;
                }
                r.x
            }
            (
                Op::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                },
                Saved::Conv { cols, in_shape },
            ) => {
                let w = fetch(ws, weight, index, op)?;
                let want_b = bias.as_deref().is_some_and(wants);
                let r = kernels::conv_backward(
                    &cols,
                    &in_shape,
                    w,
                    *stride,
                    *padding,
                    &gy,
                    [need_x, wants(weight), want_b],
                )?;
                put(weight, r.w)?;
                if let Some(b) = bias {
                    put(b, r.b)?;
                }
                r.x
            }
            (Op::Relu, Saved::Input(x)) => Some(x.zip_map(&gy, "relu backward", |xv, g| {
                if xv.primal() > 0.0 {
                    g
                } else {
                    S::zero()
                }
            })?),
            (Op::Gelu, Saved::Input(x)) => {
                Some(x.zip_map(&gy, "gelu backward", |xv, g| xv.gelu_grad() * g)?)
            }
            (Op::BatchnormAffine { .. }, _) => {
                for w in op.weight_names() {
                    if wants(w) {
                        return Err(Error::Op {
                            index,
                            kind: op.kind(),
                            message: format!("`{w}` is a frozen normalization parameter"),
                        });
                    }
                }
                let (scale, _) = bn_params(ws, index, op)?;
                Some(kernels::channel_scale(&gy, &scale))
            }
            (Op::ResidualAdd, _) => {
                if let Some(b) = pairs[rel] {
                    skip_grads.insert(b, gy.clone());
                }
                Some(gy)
            }
            (Op::ResidualBegin, _) => {
                let mut gx = gy;
                if let Some(extra) = skip_grads.remove(&rel) {
                    gx.add_assign(&extra)?;
                }
                Some(gx)
            }
            (Op::Avgpool { kernel, stride }, Saved::Shape(shape)) => {
                Some(kernels::avgpool_backward(&shape, *kernel, *stride, &gy)?)
            }
            (Op::Maxpool { .. }, Saved::ArgMax { index, in_shape }) => {
                Some(kernels::maxpool_backward(&index, &in_shape, &gy)?)
            }
            (Op::Flatten, Saved::Shape(shape)) => Some(gy.reshape(&shape)?),
            (Op::Softmax, Saved::Probs(p)) => Some(kernels::softmax_backward(&p, &gy)?),
            (
                Op::AttentionQkv {
                    wq,
                    wk,
                    wv,
                    heads,
                    head_dim,
                },
                Saved::Attention(s),
            ) => {
                let r = kernels::attention_backward(
                    &s,
                    fetch(ws, wq, index, op)?,
                    fetch(ws, wk, index, op)?,
                    fetch(ws, wv, index, op)?,
                    *heads,
                    *head_dim,
                    &gy,
                    need_x,
                )?;
                if wants(wq) {
                    put(wq, Some(r.wq))?;
                }
                if wants(wk) {
                    put(wk, Some(r.wk))?;
                }
                if wants(wv) {
                    put(wv, Some(r.wv))?;
                }
                r.x
            }
            (op, _) => {
                return Err(Error::Op {
                    index,
                    kind: op.kind(),
                    message: "backward called without a forward trace".into(),
                })
            }
        })
    }
}
