//! Minimal differentiable building blocks on top of candle tensors.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod params;

pub use conv::{upsample2x, Conv2d};
pub use layers::{Embedding, LayerNorm, Linear, Transformer, TransformerConfig};
pub use params::{Group, Init, Param, ParamStore};
