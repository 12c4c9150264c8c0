//! Labelled datasets: fixed-size binary records and a seeded synthetic
//! generator.
//!
//! A record is `label_bytes` label bytes followed by one feature block of
//! `numel(feature_shape)` values. With `label_bytes = 2` the second byte is
//! the class (the coarse/fine layout of the 100-class image set); with one
//! byte it is the only byte. Features are either `u8` (scaled to `[0, 1]`
//! on read) or little-endian `f32`.
//!
//! The 10-class 32×32 colour image set ships in exactly this layout:
//! [`RecordFormat::cifar10`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    U8,
    F32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordFormat {
    pub label_bytes: usize,
    pub feature_shape: Vec<usize>,
    pub encoding: Encoding,
}

impl RecordFormat {
    pub fn cifar10() -> Self {
        RecordFormat {
            label_bytes: 1,
            feature_shape: vec![3, 32, 32],
            encoding: Encoding::U8,
        }
    }

    pub fn cifar100() -> Self {
        RecordFormat {
            label_bytes: 2,
            ..Self::cifar10()
        }
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes
            + numel(&self.feature_shape)
                * match self.encoding {
                    Encoding::U8 => 1,
                    Encoding::F32 => 4,
                }
    }

    fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.label_bytes) {
            return Err(Error::Data(format!("label_bytes must be 1 or 2, got {}", self.label_bytes)));
        }
        if self.feature_shape.is_empty() || self.feature_shape.contains(&0) {
            return Err(Error::Data(format!("invalid feature shape {:?}", self.feature_shape)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(n, …feature_shape)`.
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() < 2 || x.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                x.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Dataset {
            x: self.x.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        })
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n > self.len() {
            return Err(Error::Data(format!("cannot split {} samples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    /// The first `n` samples after a seeded shuffle.
    pub fn calibration(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Data(format!(
                "calibration size {n} must be in 1..={}",
                self.len()
            )));
        }
        let perm = Rng::substream(seed, "calibration").permutation(self.len());
        self.select(&perm[..n])
    }

    pub fn to_records(&self, fmt: &RecordFormat) -> Result<Vec<u8>> {
        fmt.validate()?;
        if self.feature_shape() != fmt.feature_shape.as_slice() {
            return Err(Error::shape("record features", self.feature_shape(), &fmt.feature_shape));
        }
        if self.classes > 256 {
            return Err(Error::Data(format!("{} classes do not fit a label byte", self.classes)));
        }
        let d = numel(&fmt.feature_shape);
        let mut out = Vec::with_capacity(self.len() * fmt.record_len());
        for (i, &label) in self.labels.iter().enumerate() {
            out.extend(std::iter::repeat_n(0u8, fmt.label_bytes - 1));
            out.push(label as u8);
            let row = &self.x.data()[i * d..(i + 1) * d];
            match fmt.encoding {
                Encoding::U8 => out.extend(row.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)),
                Encoding::F32 => {
                    for &v in row {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_records(bytes: &[u8], fmt: &RecordFormat, classes: usize) -> Result<Self> {
        fmt.validate()?;
        let len = fmt.record_len();
        if bytes.is_empty() || !bytes.len().is_multiple_of(len) {
            return Err(Error::Data(format!(
                "{} bytes is not a whole number of {len}-byte records",
                bytes.len()
            )));
        }
        let n = bytes.len() / len;
        let d = numel(&fmt.feature_shape);
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for rec in bytes.chunks_exact(len) {
            labels.push(rec[fmt.label_bytes - 1] as usize);
            let feats = &rec[fmt.label_bytes..];
            match fmt.encoding {
                Encoding::U8 => data.extend(feats.iter().map(|&b| b as f64 / 255.0)),
                Encoding::F32 => data.extend(
                    feats
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
                ),
            }
        }
        let mut shape = vec![n];
        shape.extend(&fmt.feature_shape);
        Dataset::new(Tensor::new(shape, data)?, labels, classes)
    }
}

/// Class-conditional Gaussians: each class has a standard normal prototype
/// and samples are prototype plus isotropic noise of std `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub feature_shape: Vec<usize>,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.samples == 0 || self.classes == 0 || !(self.noise >= 0.0) {
            return Err(Error::Data(format!(
                "synthetic data needs samples, classes > 0 and noise ≥ 0, got {self:?}"
            )));
        }
        let d = numel(&self.feature_shape);
        let protos: Tensor = Rng::substream(self.seed, "data/prototypes").normal_tensor(&[self.classes, d], 1.0);
        let mut labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        let mut rng = Rng::substream(self.seed, "data/samples");
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(self.samples * d);
        for &l in &labels {
            let p = &protos.data()[l * d..(l + 1) * d];
            data.extend(p.iter().map(|&v| v + self.noise * rng.normal()));
        }
        let mut shape = vec![self.samples];
        shape.extend(&self.feature_shape);
        Dataset::new(Tensor::new(shape, data)?, labels, self.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            samples: 30,
            feature_shape: vec![2, 3, 3],
            classes: 10,
            noise: 0.5,
            seed: 9,
        }
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = spec().generate().unwrap();
        assert_eq!(a, spec().generate().unwrap());
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        let b = SyntheticSpec { seed: 10, ..spec() }.generate().unwrap();
        assert_ne!(a.x, b.x);
    }

    #[test]
    fn f32_records_roundtrip() {
        let a = spec().generate().unwrap();
        let fmt = RecordFormat {
            label_bytes: 1,
            feature_shape: vec![2, 3, 3],
            encoding: Encoding::F32,
        };
        let bytes = a.to_records(&fmt).unwrap();
        assert_eq!(bytes.len(), 30 * (1 + 18 * 4));
        let b = Dataset::from_records(&bytes, &fmt, 10).unwrap();
        assert_eq!(b.labels, a.labels);
        for (x, y) in a.x.data().iter().zip(b.x.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }

    #[test]
    fn u8_layout_with_two_label_bytes() {
        let fmt = RecordFormat {
            label_bytes: 2,
            feature_shape: vec![3],
            encoding: Encoding::U8,
        };
        let bytes = [7, 4, 0, 255, 51, 1, 2, 10, 20, 30];
        let d = Dataset::from_records(&bytes, &fmt, 5).unwrap();
        assert_eq!(d.labels, vec![4, 2]);
        assert_eq!(d.x.data()[..3], [0.0, 1.0, 0.2]);
        assert!(Dataset::from_records(&bytes[..9], &fmt, 5).is_err());
        assert!(Dataset::from_records(&bytes, &fmt, 3).is_err());
    }

    #[test]
    fn calibration_takes_a_seeded_subset() {
        let a = spec().generate().unwrap();
        let c = a.calibration(8, 1).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c, a.calibration(8, 1).unwrap());
        assert!(a.calibration(31, 1).is_err());
    }
}
