//! Variational information-flow (VIF) attender on a from-scratch multimodal
//! transformer, with the attention-flow diagnostics that motivate it.
//!
//! The crate is organized around a small taped autodiff engine ([`tensor`]),
//! a toy decoder-only multimodal backbone ([`backbone`]), the CVAE attender
//! ([`attender`]) whose latents decode to a spatial Gaussian mixture
//! ([`mixture`]) injected into deep-layer attention ([`inject`]), the
//! training objective ([`loss`]), synthetic grid-world VQA data ([`synth`]),
//! a training/evaluation harness ([`training`]), and attention-flow
//! statistics ([`flowstat`]).

pub mod error;
pub mod attender;
pub mod checkpoint;
pub mod config;
pub mod backbone;
pub mod flowstat;
pub mod inject;
pub mod loss;
pub mod mixture;
pub mod model;
pub mod params;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Result, VifError};
