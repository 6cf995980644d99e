// SPDX-License-Identifier: MIT OR Apache-2.0

//! Factual-recall interpretability toolkit: a small decoder-only transformer
//! with full activation capture, direct logit attribution (optionally split
//! by source token group), head taxonomy, causal interventions, an additivity
//! detector, and hand-built fixture models with closed-form ground truth.

pub mod attribution;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod taxonomy;
pub mod tensor_file;
pub mod trace;

pub use error::{Error, Result};
