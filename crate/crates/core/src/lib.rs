//! Fast influence functions for small differentiable models.
//!
//! The pipeline restricts the candidate set with a nearest-neighbor search
//! over the model's final representation ([`nnindex`]), estimates
//! `s_test = H⁻¹∇L(z_test)` with the LiSSA recursion ([`lissa`]), and scores
//! candidates as `-s_test·∇L(z)` ([`engine`]). [`eval`] holds the validation
//! apparatus (recall, leave-one-out retraining, correlations, timing) and
//! [`correct`] the applications built on top of influence scores.

pub mod binio;
pub mod correct;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod lissa;
pub mod model;
pub mod nnindex;
pub mod parallel;
pub mod seed;
pub mod synth;

pub use data::{DataPoint, Dataset, Role};
pub use error::{Error, Result};
pub use model::{GradVector, ModelSpec, ParamVector};
