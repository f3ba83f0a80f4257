//! Few-shot hyperspectral patch classification with an attention-weighted
//! prototype network.
//!
//! The pipeline is split into small modules that mirror the data flow:
//!
//! * [`hsi_data`] loads cubes, cuts patches, splits and augments the few
//!   labelled target samples, and synthesises test scenes.
//! * [`episodes`] draws C-way K-shot tasks from a labelled pool.
//! * [`numeric`] is the dense tensor tape with hand-derived backward passes.
//! * [`model`] is the mapping layer plus self-attention encoder stack.
//! * [`mixing`] pastes rectangular regions between query patches and derives
//!   the label weights from area or attention mass.
//! * [`loss`] builds prototypes and the mixed-label episodic cross entropy.
//! * [`training`] owns initialisation, Adam and the two-phase schedule.
//! * [`evaluation`] runs KNN over learned features and scores the result.
//! * [`pipeline`] strings the steps together for one scene and seed.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod hsi_data;
pub mod loss;
pub mod mixing;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, LoadError, Result};
