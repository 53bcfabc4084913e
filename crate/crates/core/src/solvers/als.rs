use rayon::prelude::*;

use crate::data::SparseTensor;
use crate::error::{Error, Result};
use crate::model::FactorModel;

use super::{build_column_system, check_compatible, precompute_shared, TrainConfig};

/// Sets every column of dimension `dim` to the exact minimizer
/// `(C⁽ⁱʲ⁾ + λ_eff I)⁻¹ O⁽ⁱʲ⁾` and refreshes its Gram.
pub fn als_update_dimension(
    model: &mut FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    config: &TrainConfig,
) -> Result<()> {
    check_compatible(model, tensor, dim, config)?;
    let k = model.k();
    let shared = precompute_shared(model, dim, config.w0);
    let mut m = model.take_matrix(dim);
    let view: &FactorModel = model;
    let result = m
        .par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(j, col)| -> Result<()> {
            let system = build_column_system(
                view,
                tensor,
                dim,
                j,
                &shared,
                config.lambda,
                config.reg_mode,
            );
            let x = system.solve().map_err(|_| Error::Numerical {
                dim,
                column: j,
                message: format!(
                    "singular system (lambda_eff = {}); use lambda > 0",
                    system.lambda_eff
                ),
            })?;
            col.copy_from_slice(&x);
            Ok(())
        });
    model.restore_matrix(dim, m);
    result
}
