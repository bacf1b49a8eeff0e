//! Quantum and classical dynamics of ions in oscillating quadrupole traps.

pub mod crystal;
pub mod error;
pub mod floquet;
pub mod grid;
pub mod hagedorn;
pub mod hermite;
pub mod ode;
pub mod oracle;
pub mod states;

pub use error::{Error, Result};
