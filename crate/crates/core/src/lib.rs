//! Verified quadratic characterizations of scalar relations and their use in
//! QC-based semidefinite programs for feedforward network reachability.
//!
//! The crate is organized bottom-up:
//!
//! - [`poly`], [`quadratic`]: bivariate polynomials and quadratic forms.
//! - [`relation`]: scalar relations on compact domains and sampling.
//! - [`conic`]: LP/SOCP/SDP modeling and the solver boundary.
//! - [`candgen`]: data-driven candidate quadratic constraints.
//! - [`soscert`]: SOS verification, relaxed bands and certificate re-checks.
//! - [`network`]: feedforward networks, interval bounds, pruning, blocks.
//! - [`reach`]: reachability and safety SDPs.
//! - [`tighten`]: layerwise polytope propagation of neuron bounds.
//! - [`family`], [`pipeline`]: family files, characterization recipes, audits.

pub mod candgen;
pub mod conic;
pub mod error;
pub mod family;
pub mod network;
pub mod pipeline;
pub mod poly;
pub mod quadratic;
pub mod reach;
pub mod relation;
pub mod soscert;
pub mod tighten;

pub use error::{Error, Result};
pub use poly::Polynomial2;
pub use quadratic::QuadraticForm;
pub use relation::{Interval, Point, ScalarRelation, SemialgebraicPiece};
