//! Simulation workbench for a two-phase pipe flow: a phase-space density of
//! particles subject to fluid drag (a Vlasov equation with friction) coupled
//! to the incompressible Navier-Stokes equations on a 2D rectangular pipe
//! with injection on the left side and absorption on the other sides.
//!
//! The crate provides
//! * the pipe geometry and boundary classification ([`geometry`]),
//! * staggered-grid velocity fields, their extension to the plane and the
//!   norms used by the fixed-point construction ([`fields`]),
//! * characteristic tracing, exit/entry times and exit geometric condition
//!   checks ([`characteristics`]),
//! * phase-space distributions, stationary transport along backward
//!   characteristics and a semi-Lagrangian evolution ([`kinetic`]),
//! * a steady Stokes solver, a projection Navier-Stokes stepper and energy
//!   bookkeeping ([`fluid`]),
//! * the fixed-point construction of nontrivial stationary states
//!   ([`equilibrium`]),
//! * coupled evolution, perturbation experiments, the delayed Gronwall rate
//!   and decay fitting ([`stability`]).

pub mod characteristics;
pub mod coupling;
pub mod equilibrium;
pub mod error;
pub mod fields;
pub mod fluid;
pub mod geometry;
pub mod kinetic;
pub mod stability;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
