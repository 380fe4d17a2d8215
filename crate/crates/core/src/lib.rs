//! Set-membership identification of linear systems under bounded noise.
//!
//! The crate simulates `x_{t+1} = A x_t + B u_t + w_t` with `w_t` drawn from a
//! compact convex set `W`, maintains the set of parameters consistent with
//! every observed transition, certifies its diameter with a cutting-plane LP,
//! and compares it with a regularized least-squares confidence region.

// `!(x > 0.0)` is used so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convex_support;
pub mod lp;
pub mod lti_sim;
pub mod uncertainty_set;
pub mod estimators;
pub mod theory_bounds;
pub mod experiment;
