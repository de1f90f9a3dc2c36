//! Low-dimensional parametric models learned from snapshot data:
//! POD reduction, a dense autoencoder and a sparse polynomial latent
//! system trained jointly, plus time-marching and periodic-orbit
//! continuation of the identified system.

pub mod cli;
pub mod continuation;
pub mod dataset;
pub mod error;
pub mod integrator;
pub mod neuralnet;
pub mod oracles;
pub mod pod;
mod serial;
pub mod sindy;
pub mod trainer;

pub use error::{Error, Result};
