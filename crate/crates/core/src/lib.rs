//! One-shot pruning with K-step reconstruction and Hessian-free Newton.
//!
//! Each prunable layer gets a magnitude or N:M mask. The surviving weights
//! are then fitted so the next `K` target activations match the dense
//! network on a calibration batch, using damped Newton steps solved by CG
//! on exact Hessian-vector products.
//!
//! ```
//! use snows::pipeline::{prune_network, MaskSpec, PruneConfig};
//! use snows::{zoo, Rng, Tensor};
//!
//! let manifest = zoo::mlp(&[8, 8, 4]).unwrap();
//! let net = zoo::init::<f64>(&manifest, 0).unwrap();
//! let calib: Tensor = Rng::new(1).normal_tensor(&[64, 8], 1.0);
//! let cfg = PruneConfig::uniform(&manifest, MaskSpec::NOfM { n: 2, m: 4 }, 1);
//! let out = prune_network(&net, &cfg, &calib).unwrap();
//! assert_eq!(out.report.sparsity, 0.5);
//! ```

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod error;
pub mod hvp;
pub mod masks;
pub mod netgraph;
pub mod newton;
pub mod oracles;
pub mod pipeline;
pub mod recon;
pub mod studies;
pub mod tensor;
pub mod vit;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{DType, Dual, Real, Rng, Scalar, Tensor};
