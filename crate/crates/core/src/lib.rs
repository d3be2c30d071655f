// SPDX-License-Identifier: MIT OR Apache-2.0

//! # cloom-core
//!
//! Desk-scale circuit tracing for a small vision-language transformer.
//!
//! The crate trains a toy VLM on synthetic multimodal tasks, fits one TopK
//! transcoder per decoder MLP, and builds attribution graphs over the
//! resulting replacement model with all nonlinearities frozen at their
//! prompt values. Features are characterized by activation statistics and
//! vision-tower attention rollout, and circuits are validated causally by
//! clamping, steering and cross-prompt patching.

pub mod attribution;
pub mod container;
pub mod error;
pub mod features;
pub mod intervention;
pub mod numeric;
pub mod rollout;
pub mod transcoder;
pub mod vlm;

pub use error::{CloomError, Result};
