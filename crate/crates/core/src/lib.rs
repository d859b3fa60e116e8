//! Macular heightmap prediction from color fundus images with a deeply
//! supervised stacked U-Net conditional GAN.

pub mod codec;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
