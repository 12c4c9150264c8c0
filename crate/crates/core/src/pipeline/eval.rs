use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::layers;
use crate::error::{Error, Result};
use crate::netgraph::NetworkGraph;
use crate::tensor::{Scalar, Tensor};

const EVAL_CHUNK: usize = 256;

/// Arg-max class of each sample's output row.
pub fn predict<T: Scalar>(graph: &NetworkGraph<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let n = x.shape().first().copied().unwrap_or(0);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect();
    let parts = ranges
        .into_par_iter()
        .map(|(a, b)| {
            let rows: Vec<usize> = (a..b).collect();
            let y = graph.forward(&x.select_rows(&rows)?)?;
            let c = y.row_len();
            Ok(y.data()
                .chunks(c)
                .map(|row| {
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if v.to_f64() > row[best].to_f64() {
                            best = j;
                        }
                    }
                    best
                })
                .collect::<Vec<usize>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

pub fn accuracy<T: Scalar>(graph: &NetworkGraph<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let pred = predict(graph, &data.x.cast())?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub name: String,
    pub horizon: usize,
    pub loss: f64,
    pub per_k: Vec<f64>,
}

/// K-step reconstruction loss of every pruned layer, measured as during
/// pruning: inputs cascaded through `pruned`, targets from `dense` weights
/// at the layer and downstream.
pub fn layer_losses<T: Scalar>(
    dense: &NetworkGraph<T>,
    pruned: &NetworkGraph<T>,
    x: &Tensor<T>,
    k: usize,
) -> Result<Vec<LayerLoss>> {
    if dense.manifest() != pruned.manifest() {
        return Err(Error::Config("dense and pruned graphs have different manifests".into()));
    }
    let mut state = pruned.input(x)?;
    let mut cur = 0;
    let mut out = Vec::new();
    for layer in layers(dense.manifest()) {
        state = pruned.forward_range(state, cur, layer.op, &[])?.0;
        cur = layer.op;
        let sub = dense.sub_network(layer.op, k)?;
        let targets = sub.forward_capture(&state, &[])?;
        let overrides: Vec<(&str, &Tensor<T>)> = layer
            .weights
            .iter()
            .map(|w| Ok((w.as_str(), pruned.weight(w)?)))
            .collect::<Result<_>>()?;
        let caps = sub.forward_capture(&state, &overrides)?;
        let per_k: Vec<f64> = caps
            .iter()
            .zip(&targets)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (p.to_f64() - q.to_f64()).powi(2))
                    .sum()
            })
            .collect();
        out.push(LayerLoss {
            name: layer.name(),
            horizon: sub.horizon(),
            loss: per_k.iter().sum(),
            per_k,
        });
    }
    Ok(out)
}
