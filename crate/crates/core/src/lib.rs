//! Crack segmentation with a U-Net whose encoder is a ResNet-34.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
