//! Tabular off-policy policy evaluation with regularized gradient temporal-difference learning.
//!
//! The crate covers the full pipeline: tabular MDP models and their induced quantities
//! ([`mdp`]), closed-form saddle-point and solution-set oracles ([`closed_form`]), stochastic
//! learners ([`learners`]), deterministic primal-dual dynamics ([`dynamics`]), benchmark problem
//! generators ([`environments`]) and a seeded experiment runner that writes CSV results
//! ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod closed_form;
pub mod dynamics;
pub mod environments;
pub mod error;
pub mod harness;
pub mod learners;
pub mod linalg;
pub mod mdp;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
