pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod p2z;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod vae;
pub mod wake;

pub use error::{Error, Result};
