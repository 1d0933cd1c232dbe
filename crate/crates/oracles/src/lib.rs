//! Brute-force reference implementations in plain `f64`.
//!
//! Nothing here shares code with `capdet-core`; each function is the most direct transcription
//! of its definition, favouring clarity over speed.

pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod assign;
