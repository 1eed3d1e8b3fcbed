//! Information-lattice dynamics for 1D nearest-neighbor spin chains.
//!
//! The crate decomposes quantum-state information onto the information
//! lattice (information per position and scale, with locally conserved
//! currents) and time-evolves sets of local density matrices without a
//! global state, using Petz-recovery and information-flow derivative
//! policies, local Gibbs-state reconstruction, and a dense exact-evolution
//! oracle for verification.

pub mod error;
pub mod experiments;
pub mod hamiltonian;
pub mod hermitian;
pub mod integrator;
pub mod lattice;
pub mod local_state;
pub mod oracle;
pub mod flow;
pub mod gibbs;
pub mod petz;

mod eig;
pub(crate) mod matutil;

pub mod random;

pub use error::{Error, Result};
