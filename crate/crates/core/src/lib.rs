// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numerical core for edit forensics.
//!
//! Closed-form locate-then-edit updates (ROME, MEMIT, AlphaEdit), the two
//! stage key-space attack that reads edited subjects back out of a weight
//! delta, the subspace camouflage defense, and executable checks of the
//! identities that tie them together. Everything runs against a seeded
//! synthetic world so results are reproducible bit for bit.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod camouflage;
pub mod editors;
mod error;
pub mod kster;
pub mod mat;
pub mod rng;
pub mod verify;
pub mod worldsim;

pub use error::{Error, Result};
pub use mat::Mat;
