//! Hybrid offline/online reinforcement learning on finite-horizon MDPs.
//!
//! The crate pairs fitted Q-iteration over mixed offline and online data
//! ([`hyq`]) with exact tabular oracles ([`mdp`], [`analysis`]), the
//! synthetic environments used to study it ([`envs`]), offline dataset
//! generators ([`datasets`]), function classes ([`function_approx`]),
//! baseline learners ([`baselines`]) and a config-driven experiment
//! harness ([`harness`]).

pub mod error;
pub mod mdp;
pub mod rng;

pub use error::{Error, Result};
pub mod datasets;
pub mod envs;
pub mod function_approx;
pub mod hyq;
pub mod baselines;
pub mod analysis;
pub mod harness;
pub mod registry;
