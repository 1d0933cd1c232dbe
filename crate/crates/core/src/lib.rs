//! Joint open-vocabulary detection and dense captioning at desk scale.
//!
//! One model aligns per-anchor region features with concept embeddings
//! (category definitions or region captions) and decodes a caption for any
//! region. Everything runs on CPU over synthetic scenes.

pub mod assign;
pub mod caption;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod train;
pub mod nn;

pub use error::{Error, Result};
pub use geometry::BBox;
