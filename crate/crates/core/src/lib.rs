//! Hypernetwork-based GAN inversion on a toy StyleGAN2-style generator.

pub mod editing;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod genspec;
pub mod hypernet;
pub mod inversion;
pub mod losses;
pub mod modulation;
pub mod trainer;

pub use error::{Error, Result};
