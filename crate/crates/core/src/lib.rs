//! Spontaneous emission of photons by Born-Oppenheimer molecules.
//!
//! The crate discretises a molecule with one nuclear degree of freedom on a periodic grid,
//! builds the adiabatic band structure of the electronic fiber, the superadiabatic
//! projections, the dressed photon vacuum of a one-photon truncated field and the decay
//! rates of an excited band.

pub mod bands;
pub mod batch;
pub mod decay;
pub mod dense;
pub mod diffop;
pub mod dressed;
pub mod error;
pub mod fiber;
pub mod grid;
pub mod harness;
pub mod krylov;
pub mod model;
pub mod persist;
pub mod propagators;
pub mod rng;
pub mod scaling;
pub mod state;
pub mod superadiabatic;

pub use num_complex::Complex64 as C64;

pub use error::{Error, Result};
