//! Adversarial fine-tuning of dual-encoder image-text models guided by
//! text-conditioned attention maps, with the attack, evaluation, and
//! reporting machinery around it.

pub mod archive;
pub mod attacks;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
