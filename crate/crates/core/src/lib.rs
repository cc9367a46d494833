//! DRAM address-mapping recovery and prefetch-based Rowhammer simulation.
//!
//! Two halves share the [`dram::AddressMapping`] type:
//!
//! * [`probe`] and [`remap`] recover XOR bank functions and the row-bit range
//!   from same-bank-different-row (SBDR) latency measurements, using a
//!   pairwise deduction over differing-bit sets of size 1 to 4.
//! * [`uarch`], [`hammer`] and [`fuzz`] model a single hardware thread
//!   issuing load- or prefetch-based hammer loops, a DIMM with a TRR
//!   sampler, and fuzzing/sweeping campaigns over non-uniform patterns.

pub mod bits;
pub mod dram;
pub mod error;
pub mod fuzz;
pub mod hammer;
pub mod probe;
pub mod remap;
pub mod seed;
pub mod uarch;

pub use error::{Error, Result};
