//! Desk-scale laboratory for multi-stage ranking cascades.
//!
//! The crate covers two halves of the same story:
//!
//! * how a predictor that is unbiased on its whole candidate pool becomes
//!   over-calibrated on the set it selects ([`order_stats`], [`cascade_sim`]);
//! * how later stages (or a larger non-serving model) can correct earlier
//!   ones with pseudo-labels on unlabeled candidates ([`distill`], [`ssfs`],
//!   [`sslfm`]), built on synthetic pools with known ground truth
//!   ([`synthgen`]) and small hand-differentiated models ([`predictor`]).
//!
//! Every random draw flows from a root seed through named substreams
//! ([`rng`]), so results do not depend on thread count.

pub mod cascade_sim;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod order_stats;
pub mod predictor;
pub mod report;
pub mod rng;
pub mod ssfs;
pub mod sslfm;
pub mod synthgen;

pub use data::{Dataset, Matrix};
pub use error::{Error, Result};
