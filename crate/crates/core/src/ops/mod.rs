//! Differentiable operations recorded on a [`Tape`](crate::tape::Tape).

mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use nn::{conv_out_extent, Conv2dOpts, LAYER_NORM_EPS};
pub use shape::downsample_labels;

