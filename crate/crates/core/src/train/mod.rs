//! Configuration, optimizer, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use config::{BatchMix, TrainConfig};
pub use trainer::{fit, FitOutcome, TrainData, Trainer};
