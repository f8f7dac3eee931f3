//! Sparse bundle adjustment engine built around co-observation-indexed
//! Schur elimination, with a cycle-level latency model of a pipelined
//! Schur-elimination accelerator.
//!
//! The crate is organized along the processing pipeline:
//!
//! - [`bal_io`] parses and writes the BAL plain-text problem format.
//! - [`camera`] implements the BAL projection model, reprojection residuals
//!   and their analytic Jacobian blocks.
//! - [`coobs`] builds the co-observation index (per-point sorted camera
//!   sets) and the point-major block Jacobian that drives elimination.
//! - [`schur`] forms the reduced camera system by eliminating point blocks
//!   and back-substitutes point updates.
//! - [`linalg`] holds the small dense kernels: adjugate-based 3x3 inversion
//!   and a pivotless Cholesky solve for the reduced system.
//! - [`lm`] is the Levenberg-Marquardt driver tying the above together.
//! - [`pesim`] predicts cycle counts for pipelined processing-element
//!   configurations over a co-observation histogram.
//! - [`synthetic`] generates seeded ground-truth problems for testing and
//!   verification.

pub mod bal_io;
pub mod camera;
pub mod coobs;
pub mod linalg;
pub mod lm;
pub mod pesim;
pub mod schur;
pub mod synthetic;
