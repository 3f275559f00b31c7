//! Generative zero-shot learning trained end to end through a prototypical
//! few-shot classifier.

pub mod autodiff;
pub mod nn;
pub mod backbones;
pub mod fsl;
pub mod data;
pub mod pipeline;
pub mod kv;
pub mod config;
pub mod error;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
