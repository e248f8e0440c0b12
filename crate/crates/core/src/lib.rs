//! Differentially private continual releases over dynamic databases.
//!
//! A dynamic database is modelled as a [`changelog::Changelog`]: a sorted,
//! immutable sequence of value-change mutations. Continual releases run
//! linear-query changes over time-range filters of that log:
//!
//! - [`engines`] executes disjoint (DCR), sliding-window (SWCR) and
//!   hierarchical (HDCR) releases, covers ranges with HDCR nodes, and derives
//!   sliding windows from a hierarchy.
//! - [`accountant`] computes the privacy loss of each release under
//!   at-most-k, time-bounded and hybrid mutation constraints, for both global
//!   and local differential privacy.
//! - [`rr`] continually releases randomized responses about answer changes
//!   and estimates the true answer histogram without bias.
//! - [`oracles`] holds brute-force verifiers that are independent of the
//!   engine code paths they check.

pub mod accountant;
pub mod changelog;
pub mod engines;
mod error;
pub mod mechanisms;
pub mod oracles;
pub mod rr;

pub use error::{Error, Result};
