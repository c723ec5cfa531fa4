//! Second-order preconditioning with Fisher-orthogonal variance correction.
//!
//! The crate is `no_std` (with `alloc`) so that the numerical kernels can be
//! embedded anywhere; file formats, the training loop and the CLI live in the
//! `modprec` companion crate.
//!
//! Layout:
//!
//! * [`matrix`] / [`numerics`]: dense row-major matrices, symmetric
//!   eigendecomposition, damped inverse p-th roots and the Kronecker oracle.
//! * [`preconditioners`]: AdamW, Shampoo and SOAP per-parameter state.
//! * [`fop`]: Fisher-orthogonal projection of a gradient difference.
//! * [`mlfold`]: dyadic multi-level folding over an accumulation window.
//! * [`oracle`]: exact dense Fisher references used by tests and `verify`.
//! * [`tasks`]: synthetic two-modality objectives.
//!
//! Matrices are vectorized column-major throughout, so the matrix form
//! `L·G·R` of a Kronecker metric corresponds to the explicit matrix `R ⊗ L`
//! acting on `vec(G)` (both factors are symmetric).

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod fop;
pub mod matrix;
pub mod mlfold;
pub mod numerics;
pub mod oracle;
pub mod preconditioners;
pub mod tasks;

mod math;

pub use error::{Error, Result};
pub use fop::{BetaPolicy, FopSettings, GradientPair, IdentityMetric, Metric};
pub use matrix::Matrix;
pub use mlfold::{FoldConfig, FoldState};
pub use numerics::{EigenPair, SymMatrix};
pub use oracle::DenseFisher;
pub use preconditioners::{AdamMoments, FactorState, OptimizerHyper};
pub use tasks::{Modality, ModalityTaskSpec, Task};
