//! Keyword-spotting toolkit: audio frontend, augmentation, the CNN-attention
//! classifier, training objectives, data pipeline and trainer.

pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod frontend;
pub mod gradsuite;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod prepare;
pub mod rng;
pub mod toygen;
pub mod trainer;

pub use error::{Error, Result};
