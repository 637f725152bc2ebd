//! Continuously tempered diffusion samplers.
//!
//! Controlled Langevin annealing along density paths and tempered density
//! continuums, trained with a physics-informed (continuity equation) loss
//! whose free energy is learned jointly with the control.

pub mod dynamics;
pub mod energy;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod plot;
pub mod run;
pub mod tempering;
pub mod training;
pub mod verify;

pub use error::{CtdsError, Result};
