use crate::data::SparseTensor;
use crate::linalg::{self, add_scaled_outer, hadamard_assign};
use crate::model::FactorModel;

use super::RegMode;

/// Column-independent part of the normal equations of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedPart {
    /// `C⁽ⁱ⁾ = w0 · ∘_{d≠i} 𝓜⁽ᵈ⁾`, row-major K×K.
    pub c: Vec<f64>,
    /// `O⁽ⁱ⁾`, zero because unobserved cells have target 0.
    pub o: Vec<f64>,
}

/// `w0` times the Hadamard product of every Gram except dimension `dim`.
pub fn precompute_shared(model: &FactorModel, dim: usize, w0: f64) -> SharedPart {
    let k = model.k();
    let mut c = vec![w0; k * k];
    for d in (0..model.ndim()).filter(|&d| d != dim) {
        hadamard_assign(&mut c, model.gram(d));
    }
    SharedPart { c, o: vec![0.0; k] }
}

pub fn lambda_eff(lambda: f64, mode: RegMode, support: usize) -> f64 {
    match mode {
        RegMode::Constant => lambda,
        RegMode::SupportProportional => lambda * (1.0 + support as f64),
    }
}

/// Hadamard product of the columns of every dimension but `dim` selected by
/// cell `cell`, written into `out`.
#[inline]
pub fn other_hadamard(
    model: &FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    cell: usize,
    out: &mut [f64],
) {
    out.fill(1.0);
    for (d, &i) in tensor.cell(cell).iter().enumerate() {
        if d != dim {
            hadamard_assign(out, model.column(d, i as usize));
        }
    }
}

/// The K×K system `(C + λ_eff I) x = O` of one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSystem {
    /// Row-major, symmetric.
    pub c: Vec<f64>,
    pub o: Vec<f64>,
    pub lambda_eff: f64,
}

impl ColumnSystem {
    pub fn k(&self) -> usize {
        self.o.len()
    }

    /// `C + λ_eff I`, row-major.
    pub fn regularized_matrix(&self) -> Vec<f64> {
        let k = self.k();
        let mut a = self.c.clone();
        for i in 0..k {
            a[i * k + i] += self.lambda_eff;
        }
        a
    }

    /// Exact solution by Cholesky.
    pub fn solve(&self) -> crate::Result<Vec<f64>> {
        linalg::spd_solve(&self.regularized_matrix(), &self.o)
    }
}

/// Adds the observed cells of entity `entity` in dimension `dim` to the
/// shared part: `C += (w - w0) v vᵀ`, `O += w v`.
pub fn build_column_system(
    model: &FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    entity: usize,
    shared: &SharedPart,
    lambda: f64,
    reg_mode: RegMode,
) -> ColumnSystem {
    let k = model.k();
    let w0 = tensor.w0();
    let mut c = shared.c.clone();
    let mut o = shared.o.clone();
    let mut v = vec![0.0; k];
    let cells = tensor.slice(dim, entity);
    for &cell in cells {
        let cell = cell as usize;
        let w = tensor.weight(cell);
        other_hadamard(model, tensor, dim, cell, &mut v);
        add_scaled_outer(&mut c, &v, w - w0);
        for (oi, &vi) in o.iter_mut().zip(&v) {
            *oi += w * vi;
        }
    }
    ColumnSystem {
        c,
        o,
        lambda_eff: lambda_eff(lambda, reg_mode, cells.len()),
    }
}
