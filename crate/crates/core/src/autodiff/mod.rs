//! Tensor ops with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use kernels::{mac_count, reset_mac_count, separable_flops, ConvGeom, Padding, SeparableFlops};
pub use tape::{Branch, Branches, Gradients, Tape, Var, LANDMARK_EPS, PROB_FLOOR};
