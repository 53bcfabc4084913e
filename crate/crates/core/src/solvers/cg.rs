use rayon::prelude::*;

use crate::data::SparseTensor;
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_matvec};
use crate::model::FactorModel;

use super::{check_compatible, lambda_eff, other_hadamard, precompute_shared, TrainConfig};

/// Jacobi-preconditioned conjugate gradient for `A x = b`, `A` given as an
/// operator. Runs at most `iters` steps starting from `x0`; stops early when
/// the preconditioned residual vanishes or `pᵀAp` is not positive.
pub fn solve_cg<F>(mut apply_a: F, b: &[f64], x0: &[f64], precond: &[f64], iters: usize) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let k = b.len();
    let mut x = x0.to_vec();
    let mut ap = vec![0.0; k];
    apply_a(&x, &mut ap);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(precond).map(|(ri, mi)| ri / mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..iters {
        if rz == 0.0 {
            break;
        }
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..k {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] / precond[i];
        }
        let rz_next = dot(&z, &r);
        let beta = rz_next / rz;
        for i in 0..k {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_next;
    }
    x
}

/// Approximates each column of dimension `dim` with `inner_iters` CG steps
/// warm-started from its current value. `C⁽ⁱʲ⁾` is never formed: the
/// operator applies `C⁽ⁱ⁾x + Σ (w - w0) v (vᵀx) + λ_eff x`.
pub fn cg_update_dimension(
    model: &mut FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    config: &TrainConfig,
) -> Result<()> {
    check_compatible(model, tensor, dim, config)?;
    let k = model.k();
    let w0 = tensor.w0();
    let shared = precompute_shared(model, dim, config.w0);
    let mut m = model.take_matrix(dim);
    let view: &FactorModel = model;
    let result = m
        .par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(j, col)| -> Result<()> {
            let cells = tensor.slice(dim, j);
            let lam = lambda_eff(config.lambda, config.reg_mode, cells.len());
            // positives: K-vectors v and their extra weights w - w0
            let mut vs = vec![0.0; cells.len() * k];
            let mut extra = Vec::with_capacity(cells.len());
            let mut b = vec![0.0; k];
            let mut precond: Vec<f64> = (0..k).map(|i| shared.c[i * k + i] + lam).collect();
            for (&cell, v) in cells.iter().zip(vs.chunks_exact_mut(k)) {
                let w = tensor.weight(cell as usize);
                other_hadamard(view, tensor, dim, cell as usize, v);
                for i in 0..k {
                    b[i] += w * v[i];
                    precond[i] += (w - w0) * v[i] * v[i];
                }
                extra.push(w - w0);
            }
            for d in precond.iter_mut() {
                if !(*d > 0.0) {
                    *d = 1.0;
                }
            }
            let apply = |x: &[f64], y: &mut [f64]| {
                sym_matvec(&shared.c, x, y);
                for (v, &e) in vs.chunks_exact(k).zip(&extra) {
                    let s = e * dot(v, x);
                    for i in 0..k {
                        y[i] += s * v[i];
                    }
                }
                for i in 0..k {
                    y[i] += lam * x[i];
                }
            };
            let x = solve_cg(apply, &b, col, &precond, config.inner_iters);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    dim,
                    column: j,
                    message: "conjugate gradient produced non-finite values".into(),
                });
            }
            col.copy_from_slice(&x);
            Ok(())
        });
    model.restore_matrix(dim, m);
    result
}
