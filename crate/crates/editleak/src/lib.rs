// SPDX-License-Identifier: MIT OR Apache-2.0

//! Harness around `editleak-core`: config parsing, text formats and the
//! `world` / `run` / `sweep` / `verify` drivers.

pub mod config;
mod error;
pub mod harness;
pub mod textfmt;

pub use config::{CovMode, ExperimentConfig};
pub use error::{HarnessError, Result};
