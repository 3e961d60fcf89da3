//! Explainable sequential recommendation on a desk-scale budget.
//!
//! The crate is organised as a chain of stages:
//!
//! * [`data`] ingests interaction logs and catalogs, filters them, builds
//!   chronological sequences, leave-one-out splits and training instances.
//! * [`cf`] is a small causal self-attention recommender that supplies
//!   collaborative item embeddings, user representations and next-item priors.
//! * [`semantic`] serves 768-dimensional item text embeddings.
//! * [`align`] learns a shared latent space for collaborative and semantic
//!   item embeddings, with a semantic path for cold items.
//! * [`cot`] builds instruction instances, obtains reasoning texts through a
//!   generation adapter, scores them and filters the low-quality ones.
//! * [`projection`] maps user, item and reasoning signals into a token space,
//!   assembles soft prompts and trains the projections against a frozen head.
//! * [`eval`] holds ranking and text metrics and the evaluation protocols.
//! * [`pipeline`] chains the stages in memory and freezes the result.
//! * [`runner`] wires everything into resumable, file-backed stages.

pub mod align;
pub mod cf;
pub mod checkpoint;
pub mod cot;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod runner;
pub mod semantic;
pub mod tsv;

pub use error::{Error, Result};
