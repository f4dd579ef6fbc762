//! Semi-supervised representation learning with soft nearest-neighbour
//! pseudo-labels over a labeled support set, at desk scale.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objective;
pub mod optim;
pub mod support;
pub mod train;
pub mod verification;
pub mod views;

pub use autodiff::{Matrix, Tape, Var};
pub use error::{PawsError, Result};
