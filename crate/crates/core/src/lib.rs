//! Meta-Stackelberg learning for adversarial federated learning.

// NaN-rejecting guards are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod defenses;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod game;
pub mod harness;
pub mod linalg;
pub mod meta;
pub mod policy;
pub mod rng;
pub mod toy;

pub use error::{Error, Result};
