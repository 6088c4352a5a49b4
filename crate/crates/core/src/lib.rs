//! Local/global blind-patch network for self-supervised denoising of
//! spatially correlated noise.

pub mod autodiff;
pub mod bsn;
pub mod checkpoint;
pub mod config;
pub mod dtb;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Grads, Tap, TapSet, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
