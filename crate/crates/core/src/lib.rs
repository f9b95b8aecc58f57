//! Counterfactual trajectory planning pipeline.
//!
//! A desk-scale planning stack built around paired positive/negative
//! supervision: a kinematic scenario simulator, time-to-collision and
//! PDMS-style quality metrics, a counterfactual pairing data engine, a
//! small differentiable policy with exact analytic gradients, curriculum
//! supervised training, and anchor-based group-relative policy
//! optimization with failure-feedback refinement.

pub mod error;
pub mod csp;
pub mod geom;
pub mod grpo;
pub mod jsonl;
pub mod metrics;
pub mod policy;
pub mod scenario;
pub mod sft;
pub mod trace;

pub use error::{Error, Result};
