//! Binary sparsity masks: unstructured magnitude and N:M.
//!
//! N:M groups run along the input dimension: for a dense weight
//! `(d_in, d_out)` each output unit's column is cut into runs of `M`; for a
//! conv weight `(d_out, d_in, k_h, k_w)` the run is over `d_in` at a fixed
//! output channel and kernel position.
//!
//! ```
//! use snows::masks::Mask;
//! use snows::Tensor;
//!
//! let w = Tensor::<f64>::from_f64(&[4, 1], &[0.1, -0.5, 0.3, 0.2]).unwrap();
//! let z = Mask::magnitude_nm(&w, 2, 4).unwrap();
//! assert_eq!(z.pattern(), &[false, true, true, false]);
//! assert_eq!(z.apply(&w).unwrap().data(), &[0.0, -0.5, 0.3, 0.0]);
//! ```

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskKind {
    Unstructured { sparsity: f64 },
    NOfM { n: usize, m: usize },
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskKind::Unstructured { sparsity } => write!(f, "unstructured({sparsity})"),
            MaskKind::NOfM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

/// A keep/drop pattern congruent to one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
    kind: MaskKind,
}

/// Number of entries zeroed by an unstructured mask of sparsity `s`.
pub fn pruned_count(s: f64, numel: usize) -> usize {
    (s * numel as f64).round() as usize
}

/// Flat indices of every N:M group, in group-index order.
pub fn nm_groups(shape: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::Mask("M must be positive".into()));
    }
    let d_in = match shape.len() {
        2 => shape[0],
        4 => shape[1],
        _ => {
            return Err(Error::Mask(format!(
                "N:M needs a dense (d_in, d_out) or conv (d_out, d_in, k_h, k_w) weight, got {shape:?}"
            )))
        }
    };
    if d_in % m != 0 {
        return Err(Error::Mask(format!(
            "d_in = {d_in} of weight {shape:?} is not divisible by M = {m}"
        )));
    }
    let per = d_in / m;
    let mut groups = Vec::new();
    if shape.len() == 2 {
        let d_out = shape[1];
        for o in 0..d_out {
            for g in 0..per {
                groups.push((g * m..(g + 1) * m).map(|i| i * d_out + o).collect());
            }
        }
    } else {
        let (d_out, kh, kw) = (shape[0], shape[2], shape[3]);
        for n in 0..d_out {
            for i in 0..kh {
                for j in 0..kw {
                    for g in 0..per {
                        groups.push(
                            (g * m..(g + 1) * m)
                                .map(|c| ((n * d_in + c) * kh + i) * kw + j)
                                .collect(),
                        );
                    }
                }
            }
        }
    }
    Ok(groups)
}

fn by_magnitude<S: Scalar>(w: &[S]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| w[a].to_f64().abs().total_cmp(&w[b].to_f64().abs()).then(a.cmp(&b))
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; numel(shape)],
            kind: MaskKind::Unstructured { sparsity: 0.0 },
        }
    }

    /// Builds a mask from an explicit pattern, checking it against `kind`.
    pub fn from_pattern(shape: &[usize], keep: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if keep.len() != numel(shape) {
            return Err(Error::Mask(format!(
                "pattern has {} entries, shape {shape:?} needs {}",
                keep.len(),
                numel(shape)
            )));
        }
        let mask = Mask {
            shape: shape.to_vec(),
            keep,
            kind,
        };
        mask.check_kind()?;
        Ok(mask)
    }

    /// Zeros the `round(s·numel)` smallest-magnitude entries; among equal
    /// magnitudes the lower flat index is pruned first.
    pub fn magnitude_unstructured<S: Scalar>(w: &Tensor<S>, s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Mask(format!("sparsity {s} is outside [0, 1]")));
        }
        let n = w.numel();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(by_magnitude(w.data()));
        let mut keep = vec![true; n];
        for &i in &order[..pruned_count(s, n)] {
            keep[i] = false;
        }
        Ok(Mask {
            shape: w.shape().to_vec(),
            keep,
            kind: MaskKind::Unstructured { sparsity: s },
        })
    }

    /// Keeps the `N` largest-magnitude entries of every group of `M`; among
    /// equal magnitudes the lower in-group index is kept.
    pub fn magnitude_nm<S: Scalar>(w: &Tensor<S>, n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::Mask(format!("N:M needs 1 <= N <= M, got {n}:{m}")));
        }
        let groups = nm_groups(w.shape(), m)?;
        let data = w.data();
        let mut keep = vec![false; w.numel()];
        for group in groups {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                let (x, y) = (data[group[a]].to_f64().abs(), data[group[b]].to_f64().abs());
                y.total_cmp(&x).then(a.cmp(&b))
            });
            for &k in &order[..n] {
                keep[group[k]] = true;
            }
        }
        Ok(Mask {
            shape: w.shape().to_vec(),
            keep,
            kind: MaskKind::NOfM { n, m },
        })
    }

    fn check_kind(&self) -> Result<()> {
        match self.kind {
            MaskKind::Unstructured { sparsity } => {
                if !(0.0..=1.0).contains(&sparsity) {
                    return Err(Error::Mask(format!("sparsity {sparsity} is outside [0, 1]")));
                }
                let zeros = self.keep.iter().filter(|k| !**k).count();
                let want = pruned_count(sparsity, self.keep.len());
                if zeros != want {
                    return Err(Error::Mask(format!(
                        "unstructured mask at sparsity {sparsity} must zero {want} entries, found {zeros}"
                    )));
                }
            }
            MaskKind::NOfM { n, m } => {
                if n == 0 || n > m {
                    return Err(Error::Mask(format!("N:M needs 1 <= N <= M, got {n}:{m}")));
                }
                for (g, group) in nm_groups(&self.shape, m)?.iter().enumerate() {
                    let kept = group.iter().filter(|&&i| self.keep[i]).count();
                    if kept != n {
                        return Err(Error::Mask(format!(
                            "group {g} keeps {kept} of {m} entries, expected exactly {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks congruence with a weight shape and the kind's invariant.
    pub fn validate_for(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Mask(format!(
                "mask shape {:?} does not match weight shape {shape:?}",
                self.shape
            )));
        }
        self.check_kind()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn pattern(&self) -> &[bool] {
        &self.keep
    }

    pub fn numel(&self) -> usize {
        self.keep.len()
    }

    pub fn nnz(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// `1 − nnz/numel`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz() as f64 / self.numel() as f64
    }

    /// Flat indices of kept entries, ascending.
    pub fn active(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    /// `w ⊙ Z`; dropped entries become exactly zero.
    pub fn apply<S: Scalar>(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        if w.shape() != self.shape.as_slice() {
            return Err(Error::shape("mask apply", w.shape(), &self.shape));
        }
        let data = w
            .data()
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { S::zero() })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// True when every dropped entry of `w` is zero.
    pub fn holds_on<S: Scalar>(&self, w: &Tensor<S>) -> bool {
        w.shape() == self.shape.as_slice()
            && w
                .data()
                .iter()
                .zip(&self.keep)
                .all(|(&v, &k)| k || v.to_f64() == 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| k as u8).collect()
    }

    pub fn from_bytes(shape: &[usize], bytes: &[u8], kind: MaskKind) -> Result<Self> {
        if let Some(b) = bytes.iter().find(|&&b| b > 1) {
            return Err(Error::Mask(format!("mask entry {b} is not 0 or 1")));
        }
        Mask::from_pattern(shape, bytes.iter().map(|&b| b == 1).collect(), kind)
    }
}
