//! Cross-identity facial expression transfer at desk scale.
//!
//! The pipeline disentangles a source image into a compact expression code and
//! a target image into an expression-agnostic identity code, then composes the
//! two through a decoder whose intermediate layers are fused with both
//! encoders' attended skip features via compact bilinear pooling. Everything
//! runs on a small f64 reverse-mode tensor tape so every operator can be
//! checked against finite differences.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
