//! Scene-aware motion generation with a diffusion prior steered by a sparse
//! skeleton plan.

// Validation uses negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod guidance;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod planner;
pub mod scene;
