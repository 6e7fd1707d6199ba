//! Longitudinal relaxation of an NV-center electron spin in a ¹³C nuclear
//! spin bath, computed with a cluster-correlation expansion of the survival
//! probability, plus quantum Zeno analysis of repeated projective readout.
//!
//! Units: all energies are angular frequencies in rad/s, times in seconds,
//! lengths in metres, fields in tesla, ħ = 1 inside Hamiltonians. Conversions
//! to Gauss, μs and nm happen only in [`experiment`].
//!
//! Basis ordering is global: electron first with levels `(|+1⟩, |0⟩, |−1⟩)`,
//! then bath spins in ascending site order, each with `(|m=+½⟩, |m=−½⟩)`.

pub mod bath;
pub mod cce;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod physics;
pub mod zeno;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
