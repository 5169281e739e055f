//! Second-quantized simulation of multiport-based qutrit teleportation.

// Index loops over matrix rows/columns stay as ranges; the indices couple
// several arrays at once.
#![allow(clippy::needless_range_loop)]

mod linalg;

pub mod analysis;
pub mod elements;
pub mod fock;
pub mod noise;
pub mod protocol;

pub use linalg::random_unitary;
