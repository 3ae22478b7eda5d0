//! Score-aware vector and product quantization for maximum inner product
//! search.
//!
//! Datapoints are quantized under a loss that penalizes the residual
//! component parallel to the datapoint more heavily than the orthogonal
//! component, which better preserves the large inner products that matter
//! for retrieval.

// `!(x >= 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datasets;
pub mod error;
pub mod format;
pub mod geometry;
pub mod index;
mod linalg;
pub mod pq;
pub mod vq;

pub use datasets::Dataset;
pub use error::{Error, Result};
pub use geometry::{AnisotropicWeights, LossKind, WeightFunction};
pub use pq::{CodeMatrix, ProductCodebook};
pub use vq::{Codebook, TrainConfig};
