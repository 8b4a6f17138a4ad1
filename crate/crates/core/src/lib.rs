//! Adversarial-robustness workbench for code-bridged classifiers (CBCs).
//!
//! A CBC feeds the latent code of a denoising autoencoder's encoder straight
//! into a CNN whose first convolutions were removed. This crate trains the
//! three model families (base CNN, DAE-protected CNN, CBC), attacks them with
//! FGSM, BIM, MIM, DeepFool and Carlini-Wagner L2, and reports accuracy,
//! robustness, parameter counts and multiply-accumulate counts.

pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
