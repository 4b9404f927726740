//! Tensors, parameter vectors, seeded random streams and differentiable
//! primitives.

pub mod gradcheck;
pub mod ops;
mod params;
mod rng;
mod tensor;

pub use gradcheck::grad_check;
pub use params::{ParamVector, Segment};
pub use rng::{gaussian_sample, RngStream, StreamId, StreamPosition};
pub use tensor::{l2_norm, Tensor};
