//! Capsule network with dynamic routing-by-agreement, built from scratch for
//! 32x32 traffic-sign classification.
//!
//! - [`tensor`]: dense tensors with explicit forward/backward kernels
//! - [`capsule`]: convolutions, primary capsules, squash, routing
//! - [`decoder`]: class masking and the reconstruction network
//! - [`losses`]: margin, reconstruction and final losses
//! - [`training`], [`evaluation`], [`checkpoint`]: the run around the model
//! - [`gradcheck`]: finite-difference oracle for every backward pass

pub mod augment;
pub mod capsule;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use capsule::{CapsForward, CapsNet, CapsNetConfig, InitScheme, ParameterGradients};
pub use checkpoint::{Checkpoint, Precision};
pub use dataset::{Dataset, Split};
pub use decoder::{Decoder, DecoderConfig};
pub use error::{Error, Result};
pub use evaluation::{evaluate, EvalReport};
pub use losses::{LossConfig, ReconSign};
pub use network::{LossBreakdown, Network};
pub use tensor::Tensor;
pub use training::{TrainConfig, Trainer};
