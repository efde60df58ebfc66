//! Acoustic full-waveform velocity inversion with a quadratic Wasserstein
//! misfit on squared, normalized traces.

pub mod adjoint;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod models;
pub mod picking;
pub mod scaling;
pub mod transport;
pub mod wave;

pub use error::{Error, Result};
