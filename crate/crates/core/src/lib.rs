//! Semi-supervised segmentation with a label/pseudo-label-conditioned pixel-wise
//! contrastive loss trained jointly with a soft Dice loss.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod network;
pub mod optim;
pub mod preprocess;
pub mod pseudolabel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
