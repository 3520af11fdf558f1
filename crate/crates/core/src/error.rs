// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use core::fmt;

/// Failure modes shared by every module in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed argument: wrong shape, non-finite entry, id out of range.
    InvalidInput(String),
    /// A matrix expected to be symmetric positive definite is not.
    NotSpd(String),
    /// A linear system is numerically singular.
    Singular(String),
    /// `rank(P K)` fell below the number of edits.
    DegenerateProjection { rank: usize, expected: usize },
    /// Requested more directions than the matrix carries.
    InsufficientRank { requested: usize, available: usize },
    /// Sampling a full-rank edit batch failed after all retries.
    DegenerateBatch(String),
    /// `G + λI` is numerically singular for the chosen decoys.
    CamouflageDegenerate(String),
    /// An alias or equivalent-residual construction hit a singular system.
    ConstructionFailed(String),
    /// The request would exceed the memory budget.
    Resource(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::NotSpd(m) => write!(f, "matrix is not positive definite: {m}"),
            Error::Singular(m) => write!(f, "singular system: {m}"),
            Error::DegenerateProjection { rank, expected } => {
                write!(f, "degenerate projection: rank(PK) = {rank}, expected {expected}")
            }
            Error::InsufficientRank { requested, available } => {
                write!(f, "insufficient rank: requested {requested}, numerical rank {available}")
            }
            Error::DegenerateBatch(m) => write!(f, "degenerate edit batch: {m}"),
            Error::CamouflageDegenerate(m) => write!(f, "camouflage system degenerate: {m}"),
            Error::ConstructionFailed(m) => write!(f, "construction failed: {m}"),
            Error::Resource(m) => write!(f, "resource limit: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
