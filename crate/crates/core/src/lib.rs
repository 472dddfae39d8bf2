//! Introspective learning: classifiers trained on soft targets built from
//! their own saliency explanations, plus the distillation variants and
//! regularizers used as baselines.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod net;
pub mod rng;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::Network;
pub use rng::Rng;
pub use tensor::Tensor;
