//! Hybrid attention / selective state-space / mixture-of-experts decoder.

pub mod analyzer;
pub mod attention;
pub mod config;
pub mod error;
pub mod mamba;
pub mod model;
pub mod moe;
pub mod numerics;
