//! Training: exact ALS, coordinate descent on compressed negatives, and
//! Jacobi-preconditioned conjugate gradient, plus the loss they minimize.
//!
//! All three solvers share the same per-column normal equations
//! `(C^(i,j) + λ_eff I) x = O^(i,j)` where the contribution of the
//! (implicit, zero-valued) unobserved cells is the Hadamard product of the
//! other dimensions' Grams scaled by `w0`, and observed cells add
//! `(w - w0) v vᵀ` to the matrix and `w v` to the right-hand side.

mod als;
mod cd;
mod cg;
mod ica;
mod shared;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::SparseTensor;
use crate::error::{Error, Result};
use crate::model::FactorModel;

pub use als::als_update_dimension;
pub use cd::{
    cd_update_dimension, compress_negatives, solve_weighted_cd, CompressedNegatives, Diverged,
};
pub use cg::{cg_update_dimension, solve_cg};
pub use ica::{train_ica_baseline, IcaModel};
pub use shared::{
    build_column_system, lambda_eff, other_hadamard, precompute_shared, ColumnSystem, SharedPart,
};

pub use crate::linalg::gram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Als,
    Cd,
    Cg,
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "als" => Ok(Solver::Als),
            "cd" => Ok(Solver::Cd),
            "cg" => Ok(Solver::Cg),
            _ => Err(Error::invalid(format!(
                "unknown solver '{s}' (als, cd, cg)"
            ))),
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::Als => "als",
            Solver::Cd => "cd",
            Solver::Cg => "cg",
        })
    }
}

/// How the regularization of a column depends on its entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegMode {
    /// `λ_eff = λ`.
    Constant,
    /// `λ_eff = λ · (1 + N⁺_j)` with `N⁺_j` the entity's observed cells.
    SupportProportional,
}

impl std::str::FromStr for RegMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(RegMode::Constant),
            "support" | "support-proportional" => Ok(RegMode::SupportProportional),
            _ => Err(Error::invalid(format!(
                "unknown regularization mode '{s}' (constant, support)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub solver: Solver,
    pub epochs: usize,
    pub lambda: f64,
    pub reg_mode: RegMode,
    /// Inner iterations of CD sweeps or CG steps.
    pub inner_iters: usize,
    pub w0: f64,
    /// Target value of unobserved cells used when compressing negatives.
    pub p0: f64,
    pub seed: u64,
    /// Evaluate the regularized loss after every dimension update.
    pub track_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            solver: Solver::Cg,
            epochs: 10,
            lambda: 0.1,
            reg_mode: RegMode::SupportProportional,
            inner_iters: 2,
            w0: 1.0,
            p0: 0.0,
            seed: 42,
            track_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.inner_iters == 0 {
            return Err(Error::invalid("inner iterations must be at least 1"));
        }
        if !(self.w0 >= 0.0 && self.w0.is_finite()) {
            return Err(Error::invalid("w0 must be finite and non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn check_compatible(
    model: &FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    config: &TrainConfig,
) -> Result<()> {
    if model.sizes() != tensor.sizes() {
        return Err(Error::invalid(format!(
            "model sizes {:?} do not match tensor sizes {:?}",
            model.sizes(),
            tensor.sizes()
        )));
    }
    if dim >= model.ndim() {
        return Err(Error::invalid(format!("no dimension {dim}")));
    }
    if config.w0 != tensor.w0() {
        return Err(Error::invalid(format!(
            "config w0 = {} but tensor was built with w0 = {}",
            config.w0,
            tensor.w0()
        )));
    }
    Ok(())
}

/// Weighted squared error over every cell of the tensor, computed without
/// enumerating the zeros: the all-zero baseline is
/// `w0 · 1ᵀ(𝓜⁽¹⁾ ∘ … ∘ 𝓜⁽ᴰ⁾)1`, then each observed cell replaces its
/// `w0 t̂²` term by `w (1 - t̂)²`.
pub fn data_loss(model: &FactorModel, tensor: &SparseTensor) -> f64 {
    let w0 = tensor.w0();
    let mut h = model.gram(0).to_vec();
    for d in 1..model.ndim() {
        crate::linalg::hadamard_assign(&mut h, model.gram(d));
    }
    let mut total = w0 * h.iter().sum::<f64>();
    let k = model.k();
    let mut v = vec![0.0; k];
    for (idx, w) in tensor.cells() {
        v.copy_from_slice(model.column(0, idx[0] as usize));
        for (d, &i) in idx.iter().enumerate().skip(1) {
            crate::linalg::hadamard_assign(&mut v, model.column(d, i as usize));
        }
        let pred: f64 = v.iter().sum();
        total += w * (1.0 - pred).powi(2) - w0 * pred * pred;
    }
    total
}

/// Weighted loss plus `λ Σ_i ‖M⁽ⁱ⁾‖²_F`.
pub fn loss(model: &FactorModel, tensor: &SparseTensor, lambda: f64) -> f64 {
    let frob: f64 = (0..model.ndim())
        .map(|d| model.matrix(d).iter().map(|v| v * v).sum::<f64>())
        .sum();
    data_loss(model, tensor) + lambda * frob
}

/// Weighted loss plus per-column regularization `Σ λ_eff(i,j) ‖M⁽ⁱ⁾_j‖²`,
/// the objective every dimension update minimizes.
pub fn regularized_loss(
    model: &FactorModel,
    tensor: &SparseTensor,
    lambda: f64,
    reg_mode: RegMode,
) -> f64 {
    let mut reg = 0.0;
    for d in 0..model.ndim() {
        for j in 0..model.sizes()[d] {
            let col = model.column(d, j);
            let norm: f64 = col.iter().map(|v| v * v).sum();
            reg += lambda_eff(lambda, reg_mode, tensor.support(d, j)) * norm;
        }
    }
    data_loss(model, tensor) + reg
}

/// One dimension update of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 0-based dimension.
    pub dimension: usize,
    pub wall_ms: f64,
    /// Regularized loss after the update, when tracked.
    pub loss: Option<f64>,
}

/// Hooks invoked by [`train`].
pub trait TrainObserver {
    fn dimension_start(&mut self, _epoch: usize, _dim: usize, _model: &FactorModel) {}
    fn record(&mut self, _record: &TraceRecord) {}
}

impl TrainObserver for () {}

/// Writes every trace record as one JSON line.
pub struct JsonLinesSink<W: Write> {
    out: W,
    pub error: Option<std::io::Error>,
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(out: W) -> Self {
        JsonLinesSink { out, error: None }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TrainObserver for JsonLinesSink<W> {
    fn record(&mut self, record: &TraceRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("trace records serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
    }
}

/// Training failure with the trace recorded before it happened.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TrainError {
    #[source]
    pub source: Error,
    pub partial: Vec<TraceRecord>,
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.source
    }
}

/// Updates dimension `dim` with the configured solver.
pub fn update_dimension(
    model: &mut FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    config: &TrainConfig,
) -> Result<()> {
    match config.solver {
        Solver::Als => als_update_dimension(model, tensor, dim, config),
        Solver::Cd => cd_update_dimension(model, tensor, dim, config),
        Solver::Cg => cg_update_dimension(model, tensor, dim, config),
    }
}

/// Runs `config.epochs` epochs, each updating dimensions `0..D` in order.
pub fn train(
    model: &mut FactorModel,
    tensor: &SparseTensor,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<Vec<TraceRecord>, TrainError> {
    let mut trace = Vec::with_capacity(config.epochs * model.ndim());
    let fail = |source, partial| TrainError { source, partial };
    if let Err(e) = config
        .validate()
        .and_then(|_| check_compatible(model, tensor, 0, config))
    {
        return Err(fail(e, trace));
    }
    for epoch in 1..=config.epochs {
        for dim in 0..model.ndim() {
            observer.dimension_start(epoch, dim, model);
            let start = Instant::now();
            if let Err(e) = update_dimension(model, tensor, dim, config) {
                return Err(fail(e, trace));
            }
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let loss = config
                .track_loss
                .then(|| regularized_loss(model, tensor, config.lambda, config.reg_mode));
            let record = TraceRecord {
                epoch,
                dimension: dim,
                wall_ms,
                loss,
            };
            observer.record(&record);
            trace.push(record);
        }
    }
    Ok(trace)
}
