//! Fisher-selected, Stiefel-constrained low-rank adapters on a small
//! transformer.
//!
//! Phase 1 scores every layer of a frozen base model by the diagonal Fisher
//! mass of its five target projections and keeps the top `K`. Phase 2 trains
//! `ΔW = s·B·A` on those layers with AdamW on `A` and Cayley-Adam on `B`,
//! which keeps `B` on the Stiefel manifold so that the singular values of
//! `B·A` equal those of `A`.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod optim;
pub mod output;
pub mod rng;

pub use error::{ForaError, Result};
