//! Compatibility-driven curation and active elicitation of robot demonstrations.
//!
//! The crate is organised bottom-up:
//!
//! - [`demo`]: states, actions, trajectories, demonstration sets and their
//!   line-delimited record format.
//! - [`policy`]: a small MLP regression stack (layer norm, dropout, Adam on MSE)
//!   and K-member ensembles built on it.
//! - [`compat`]: per-step novelty and likelihood under a base ensemble, the
//!   thresholded compatibility score, 2D maps and threshold regression.
//! - [`curation`]: offline filtering of new demonstrations and retraining.
//! - [`elicitation`]: the prompting / demonstration / feedback session state machine.
//! - [`toyworld`]: a deterministic 2D pick-and-place world with scripted demonstrators.
//! - [`study`]: end-to-end naive-vs-informed collection experiment.

pub mod compat;
pub mod curation;
pub mod demo;
pub mod elicitation;
pub mod error;
pub mod policy;
pub mod rng;
pub mod study;
pub mod toyworld;

pub use error::{Error, Result};
