//! Minimal neural-network layer set on top of candle tensors.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Mode, Scope};
pub use params::{Init, ParamStore};
