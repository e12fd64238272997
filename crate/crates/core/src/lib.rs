pub mod augment;
pub mod defense;
pub mod error;
pub mod extraction;
pub mod linear_eval;
pub mod losses;
pub mod nn;
pub mod pow;
pub mod rng;
pub mod stats;
pub mod synthdata;
pub mod victim;

pub use error::{Error, Result};
