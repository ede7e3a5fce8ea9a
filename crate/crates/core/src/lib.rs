//! Linear-complexity visual sequence modeling with gated linear attention.

pub mod attention;
pub mod bench;
pub mod bigla;
pub mod block;
pub mod error;
pub mod gla;
pub mod grad;
pub mod kernels;
pub mod model;
pub mod ppm;
pub mod scan;
pub mod suite;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
