//! Encoder-decoder enhancement network fed by Laplacian pyramid levels, its
//! degradation-consistency objectives, and the training loop.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod spp;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use network::{FeatureTaps, ModelConfig, Network};
pub use objectives::LossReport;
pub use training::TrainConfig;
