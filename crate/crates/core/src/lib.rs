//! Text-conditioned GAN generator with sparsely routed expert blocks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod features;
pub mod generator;
pub mod moe;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod text;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
