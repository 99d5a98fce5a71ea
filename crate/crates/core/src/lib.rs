//! Attribute-enhanced vehicle re-identification.
//!
//! The crate builds a small CNN re-identification network with attribute
//! branches (colour, type), a joint module that distills attribute features
//! back into the identity feature, amelioration constraints that push the
//! compensated feature to beat the uncompensated one, a two-stage trainer and
//! retrieval evaluation (mAP / CMC). Everything runs on the CPU with a
//! self-contained reverse-mode autodiff ([`numerics::Tape`]).

pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
