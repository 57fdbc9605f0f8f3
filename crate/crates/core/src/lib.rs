//! Evidential image segmentation on a small f64 reverse-mode tape.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod euga;
pub mod evidential;
pub mod gradcheck;
pub mod io;
pub mod kan;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod progressive;
pub mod selfcheck;
pub mod special;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
