//! Empirical NTK decomposition, fine-tuning dynamics and calibration tools for
//! small classifiers `f(x) = V phi(x) + b`.

pub mod checks;
pub mod data;
pub mod error;
pub mod kernel_reg;
pub mod linalg;
pub mod logistic;
pub mod metrics;
pub mod model;
pub mod ntk;
pub mod train;

pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use model::{Architecture, FeatureExtractor, Head, HeadInit, ModelState};
pub use ntk::KernelDecomposition;
pub use train::{Mode, TrainConfig};

/// Crate version, recorded in artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
