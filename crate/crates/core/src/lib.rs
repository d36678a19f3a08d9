//! Spatially dynamic vision-transformer building blocks on a small
//! define-by-run autodiff engine: deformable patch embedding, deformable and
//! neighborhood multi-head self-attention, multi-scale deformable positional
//! encoding, and a U-shaped segmentation network assembled from them.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
