use rayon::prelude::*;

use crate::data::SparseTensor;
use crate::error::{Error, Result};
use crate::linalg::psd_cholesky;
use crate::model::FactorModel;

use super::{check_compatible, lambda_eff, other_hadamard, precompute_shared, TrainConfig};

/// The negative (unobserved) examples of one dimension compressed into
/// `K + 1` weighted examples.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedNegatives {
    pub k: usize,
    /// Column-major K×(K+1): column `c` is the input of example `c`.
    pub examples: Vec<f64>,
    /// Output of each compressed example.
    pub outputs: Vec<f64>,
}

impl CompressedNegatives {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn example(&self, c: usize) -> &[f64] {
        &self.examples[c * self.k..(c + 1) * self.k]
    }

    /// The (K+1)×(K+1) lower-triangular factor with the outputs appended as
    /// the last row, row-major.
    pub fn full_factor(&self) -> Vec<f64> {
        let n = self.k + 1;
        let mut l = vec![0.0; n * n];
        for c in 0..n {
            for r in 0..self.k {
                l[r * n + c] = self.examples[c * self.k + r];
            }
            l[self.k * n + c] = self.outputs[c];
        }
        l
    }
}

/// Factors `C' = [[C, O], [Oᵀ, p0·S]]` as `L' L'ᵀ`; the columns of `L'`
/// (first K rows as input, last row as output) are the compressed examples.
pub fn compress_negatives(
    c: &[f64],
    o: &[f64],
    p0: f64,
    s_product: f64,
) -> Result<CompressedNegatives> {
    let k = o.len();
    let n = k + 1;
    if c.len() != k * k {
        return Err(Error::invalid("C must be K×K"));
    }
    let mut aug = vec![0.0; n * n];
    for r in 0..k {
        aug[r * n..r * n + k].copy_from_slice(&c[r * k..(r + 1) * k]);
        aug[r * n + k] = o[r];
        aug[k * n + r] = o[r];
    }
    aug[k * n + k] = p0 * s_product;
    let l = psd_cholesky(&aug, n)?;
    let mut examples = vec![0.0; k * n];
    let mut outputs = vec![0.0; n];
    for col in 0..n {
        for r in 0..k {
            examples[col * k + r] = l[r * n + col];
        }
        outputs[col] = l[k * n + col];
    }
    Ok(CompressedNegatives {
        k,
        examples,
        outputs,
    })
}

/// Non-finite value met by the coordinate-descent solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diverged {
    pub sweep: usize,
    pub coordinate: usize,
}

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "coordinate descent diverged (non-finite value at sweep {}, coordinate {}); \
             try the cg solver or a larger lambda",
            self.sweep, self.coordinate
        )
    }
}

/// Weighted ridge regression by cyclic coordinate descent.
///
/// `examples` is column-major K×N_E (one K-vector per example). Minimizes
/// `Σ_e w_e (b_e - a_eᵀx)² + λ‖x‖²` with `sweeps` passes over the K
/// coordinates starting from `x0`. A residual `r = b - Aᵀx` is maintained so
/// each coordinate step is the exact one-dimensional minimizer. Coordinates
/// with no curvature (zero input everywhere and `λ = 0`) are left unchanged.
pub fn solve_weighted_cd(
    examples: &[f64],
    b: &[f64],
    x0: &[f64],
    w: &[f64],
    lambda: f64,
    sweeps: usize,
) -> std::result::Result<Vec<f64>, Diverged> {
    let k = x0.len();
    let n = b.len();
    debug_assert_eq!(examples.len(), k * n);
    debug_assert_eq!(w.len(), n);
    let mut x = x0.to_vec();
    let mut r: Vec<f64> = examples
        .chunks_exact(k)
        .zip(b)
        .map(|(a, &be)| be - crate::linalg::dot(a, &x))
        .collect();
    // curvature of each coordinate does not change across sweeps
    let mut curvature = vec![lambda; k];
    for (a, &we) in examples.chunks_exact(k).zip(w) {
        for j in 0..k {
            curvature[j] += we * a[j] * a[j];
        }
    }
    for sweep in 0..sweeps {
        for j in 0..k {
            if curvature[j] == 0.0 {
                continue;
            }
            let mut num = -lambda * x[j];
            for ((a, &we), &re) in examples.chunks_exact(k).zip(w).zip(&r) {
                num += a[j] * we * re;
            }
            let delta = num / curvature[j];
            if !delta.is_finite() {
                return Err(Diverged {
                    sweep,
                    coordinate: j,
                });
            }
            x[j] += delta;
            for (a, re) in examples.chunks_exact(k).zip(r.iter_mut()) {
                *re -= delta * a[j];
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Diverged {
            sweep: sweeps,
            coordinate: 0,
        });
    }
    Ok(x)
}

/// Coordinate-descent update of dimension `dim`.
///
/// The unobserved cells are represented by the `K + 1` compressed examples
/// of the unweighted Gram product, each with weight `w0`. Each observed cell
/// adds one example with input `v`, weight `w - w0` and output
/// `w / (w - w0)`, so that together with its `w0`-weighted share of the
/// compressed zeros it contributes exactly `w (1 - vᵀx)²`. Columns are
/// warm-started from their current values.
pub fn cd_update_dimension(
    model: &mut FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    config: &TrainConfig,
) -> Result<()> {
    check_compatible(model, tensor, dim, config)?;
    let k = model.k();
    let w0 = tensor.w0();
    let unweighted = precompute_shared(model, dim, 1.0);
    let s_product: f64 = (0..model.ndim())
        .filter(|&d| d != dim)
        .map(|d| model.sizes()[d] as f64)
        .product();
    let negatives = compress_negatives(&unweighted.c, &unweighted.o, config.p0, s_product)
        .map_err(|_| Error::Numerical {
            dim,
            column: 0,
            message: "negative-example matrix is not positive semidefinite".into(),
        })?;
    let mut m = model.take_matrix(dim);
    let view: &FactorModel = model;
    let result = m
        .par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(j, col)| -> Result<()> {
            let cells = tensor.slice(dim, j);
            let n = negatives.len() + cells.len();
            let mut examples = Vec::with_capacity(n * k);
            let mut outputs = Vec::with_capacity(n);
            let mut weights = Vec::with_capacity(n);
            examples.extend_from_slice(&negatives.examples);
            outputs.extend_from_slice(&negatives.outputs);
            weights.resize(negatives.len(), w0);
            let mut v = vec![0.0; k];
            for &cell in cells {
                let w = tensor.weight(cell as usize);
                other_hadamard(view, tensor, dim, cell as usize, &mut v);
                examples.extend_from_slice(&v);
                outputs.push(w / (w - w0));
                weights.push(w - w0);
            }
            let lam = lambda_eff(config.lambda, config.reg_mode, cells.len());
            let x = solve_weighted_cd(&examples, &outputs, col, &weights, lam, config.inner_iters)
                .map_err(|e| Error::Numerical {
                    dim,
                    column: j,
                    message: e.to_string(),
                })?;
            col.copy_from_slice(&x);
            Ok(())
        });
    model.restore_matrix(dim, m);
    result
}
