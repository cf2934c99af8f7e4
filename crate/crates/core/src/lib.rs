//! Semi-supervised training with Fix-A-Step: labeled batches are transformed
//! with MixUp against sharpened soft pseudo-labels, and the unlabeled-loss
//! gradient is dropped from any step where it conflicts with the labeled-loss
//! gradient.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), desk-scale classifiers ([`model`]), the five base
//! unlabeled losses ([`losses`]), the training step ([`optim`]), synthetic
//! class-mismatch datasets ([`data`]) and an experiment harness ([`harness`]).

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod check;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamVector, Parameter, Tensor};
