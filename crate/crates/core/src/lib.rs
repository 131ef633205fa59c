//! Pre-reasoning geometric grounding of visual tokens.
//!
//! A frozen encoder's per-layer patch features are normalized, merged 2×2 and projected
//! into a multi-level geometry bank. Each visual token routes over the bank, keeps its
//! top-K layers, and receives the aggregated evidence through a zero-initialized residual
//! projection. A synthetic proxy task and an ablation harness exercise the mechanism.

pub mod bank;
pub mod bank_io;
pub mod error;
pub mod experiment;
pub mod grounding;
pub mod numerics;
pub mod proxy;
pub mod suite;

pub use error::{Error, Result};
