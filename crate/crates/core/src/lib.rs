//! Cavity-coupled Heisenberg spin-j chain quantum battery.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. It contains the numerical core only: operator construction,
//! closed and open (Lindblad) dynamics, charging metrics, a small MLP engine
//! and the soft actor-critic charging agent. File formats, configuration and
//! the command line live in the `qbattery` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod approx;
pub mod dynamics;
pub mod error;
pub mod hilbert;
pub(crate) mod math;
pub mod metrics;
pub mod rl;
pub mod sparse;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix (Hamiltonians, density matrices, propagators).
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector (pure states).
pub type CVector = nalgebra::DVector<C64>;
