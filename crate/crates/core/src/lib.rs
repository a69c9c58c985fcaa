//! Markov-switching additive ODEs: simulation, wavelet denoising, and
//! penalized EM recovery of per-state interaction graphs.

pub mod ctmc;
pub mod denoise;
pub mod emfit;
pub mod error;
pub mod eval;
pub mod io;
pub mod rng;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
