//! Induced Markov maps, Young towers and coupling estimates for
//! non-uniformly expanding interval maps and skew products.

pub mod coupling;
pub mod error;
pub mod io;
pub mod maps;
pub mod parallel;
pub mod rng;
pub mod scheme;
pub mod stats;
pub mod structure;
pub mod tower;

pub use error::{Error, Result};
