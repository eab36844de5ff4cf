pub mod artifacts;
pub mod contrastive;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod nn;
pub mod quantizer;
pub mod rng;
pub mod stage1;

pub use error::{Error, Result};
