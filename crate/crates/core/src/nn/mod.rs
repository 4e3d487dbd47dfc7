//! Minimal neural-network toolkit on top of `candle-core`: seeded parameter
//! storage, im2col convolutions, normalization layers and a differentiable
//! bilinear resize.

pub mod conv;
pub mod layers;
pub mod params;
pub mod resize;

pub use layers::{BatchNorm2d, Conv2d, ConvOptions, LayerNorm, Linear};
pub use params::{derive_seed, stable_hash, Init, ParamPath, ParamStore};
pub use resize::{resize_bilinear, upsample2x};

/// Whether a forward pass runs in training mode. Training passes carry the
/// seed that drives dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Eval,
    Train { seed: u64 },
}

impl Phase {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}
