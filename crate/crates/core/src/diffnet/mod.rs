//! Small differentiable function approximator and its training utilities.

pub mod checkpoint;
pub mod mlp;
pub mod optim;

pub use checkpoint::{params_hash, Checkpoint, InferenceWeights};
pub use mlp::{default_time_frequencies, Activation, Mlp, MlpSpec};
pub use optim::{Adam, EmaShadow, PlateauScheduler};
