//! iTALS: alternating-least-squares factorization of sparse, weighted
//! binary preference tensors for context-aware implicit-feedback
//! recommendation.
//!
//! The crate is organised the way data flows through it:
//!
//! * [`data`] parses timestamped event logs, splits them in time and
//!   materializes the sparse preference tensor with its confidence weights.
//! * [`context`] maps events to context states (seasonal time bands or the
//!   user's previous purchases).
//! * [`model`] holds the factor matrices and their Gram caches, predicts
//!   and ranks items, and reads/writes the binary model format.
//! * [`solvers`] trains a model with exact ALS, coordinate descent on
//!   compressed negatives, or preconditioned conjugate gradient.
//! * [`eval`] computes recall@N and MAP@N on a held-out time period.
//! * [`cli`] wires everything into the `itals` command.

// `!(x > y)` also rejects NaN, which is the intent everywhere it appears.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod solvers;
pub mod synthetic;

pub use context::{blend_weights, ContextAssigner, ContextSource, ContextStates, SequenceLevel};
pub use data::{
    build_tensor, parse_event_log, time_split, Event, EventLog, Schema, SparseTensor, Vocab,
    Vocabularies, WeightScheme,
};
pub use error::{Error, Result};
pub use eval::{evaluate, map_at_n, recall_at_n, top_n, EvalOptions, EvalReport, Recommender};
pub use model::{FactorModel, Fixed};
pub use solvers::{
    loss, regularized_loss, train, RegMode, Solver, TraceRecord, TrainConfig, TrainError,
};
