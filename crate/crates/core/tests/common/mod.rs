//! Brute-force reference computations that enumerate every tensor cell.
#![allow(dead_code)]

use itals_core::model::default_roles;
use itals_core::solvers::lambda_eff;
use itals_core::{FactorModel, RegMode, SparseTensor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const W0: f64 = 1.0;
pub const WT: f64 = 100.0;

pub struct Instance {
    pub model: FactorModel,
    pub tensor: SparseTensor,
}

/// Random sizes in `2..=max_size`, K ≤ min(3, smallest size), positives
/// with probability 0.3 (at least one) and weight `WT`. `signed` draws
/// factors from [-1, 1) instead of [0, 1).
pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, max_size: usize, signed: bool) -> Instance {
    let sizes: Vec<usize> = (0..d).map(|_| rng.random_range(2..=max_size)).collect();
    let k_max = sizes.iter().copied().min().unwrap().min(3);
    let k = rng.random_range(1..=k_max);
    let matrices = sizes
        .iter()
        .map(|&s| {
            (0..s * k)
                .map(|_| {
                    let u: f64 = rng.random();
                    if signed {
                        2.0 * u - 1.0
                    } else {
                        u
                    }
                })
                .collect()
        })
        .collect();
    let model = FactorModel::from_matrices(k, sizes.clone(), default_roles(d), matrices).unwrap();
    let mut cells = Vec::new();
    for idx in all_cells(&sizes) {
        if rng.random::<f64>() < 0.3 {
            cells.push((idx, WT));
        }
    }
    if cells.is_empty() {
        cells.push((vec![0; d], WT));
    }
    let tensor = SparseTensor::new(sizes, W0, cells).unwrap();
    Instance { model, tensor }
}

/// Every index tuple of a tensor with the given sizes, last index fastest.
pub fn all_cells(sizes: &[usize]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for &s in sizes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..s as u32).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    out
}

/// Elementwise product of the columns of every dimension except `dim`.
pub fn other_product(model: &FactorModel, dim: usize, idx: &[u32]) -> Vec<f64> {
    let mut v = vec![1.0; model.k()];
    for (d, &i) in idx.iter().enumerate() {
        if d == dim {
            continue;
        }
        for (vk, c) in v.iter_mut().zip(model.column(d, i as usize)) {
            *vk *= c;
        }
    }
    v
}

fn target_and_weight(tensor: &SparseTensor, idx: &[u32]) -> (f64, f64) {
    match tensor.lookup(idx) {
        Some(id) => (1.0, tensor.weight(id)),
        None => (0.0, tensor.w0()),
    }
}

fn cells_of(model: &FactorModel, dim: usize, entity: usize) -> Vec<Vec<u32>> {
    all_cells(model.sizes())
        .into_iter()
        .filter(|idx| idx[dim] as usize == entity)
        .collect()
}

/// Weighted ridge regression of column `entity` of dimension `dim` over all
/// cells of its slice, zeros included, solved by LU on the normal equations.
pub fn dense_column(
    model: &FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    entity: usize,
    lam: f64,
) -> Vec<f64> {
    let k = model.k();
    let mut a = DMatrix::<f64>::identity(k, k) * lam;
    let mut b = DVector::<f64>::zeros(k);
    for idx in cells_of(model, dim, entity) {
        let v = DVector::from_vec(other_product(model, dim, &idx));
        let (t, w) = target_and_weight(tensor, &idx);
        a += &v * v.transpose() * w;
        b += &v * (w * t);
    }
    a.lu()
        .solve(&b)
        .expect("oracle system is singular")
        .as_slice()
        .to_vec()
}

/// Support-dependent regularization of one column.
pub fn column_lambda(
    tensor: &SparseTensor,
    dim: usize,
    entity: usize,
    lambda: f64,
    mode: RegMode,
) -> f64 {
    lambda_eff(lambda, mode, tensor.support(dim, entity))
}

/// Σ over all index tuples of the other dimensions of `w0 · v vᵀ`, row-major.
pub fn brute_shared(model: &FactorModel, dim: usize, w0: f64) -> Vec<f64> {
    let k = model.k();
    let mut c = vec![0.0; k * k];
    for idx in cells_of(model, dim, 0) {
        let v = other_product(model, dim, &idx);
        for r in 0..k {
            for s in 0..k {
                c[r * k + s] += w0 * v[r] * v[s];
            }
        }
    }
    c
}

pub fn predict(model: &FactorModel, idx: &[u32]) -> f64 {
    let idx: Vec<usize> = idx.iter().map(|&i| i as usize).collect();
    model.predict(&idx).unwrap()
}

/// Σ_all cells w (t − t̂)².
pub fn brute_data_loss(model: &FactorModel, tensor: &SparseTensor) -> f64 {
    all_cells(model.sizes())
        .iter()
        .map(|idx| {
            let (t, w) = target_and_weight(tensor, idx);
            let r = t - predict(model, idx);
            w * r * r
        })
        .sum()
}

pub fn brute_loss(model: &FactorModel, tensor: &SparseTensor, lambda: f64) -> f64 {
    let norm: f64 = (0..model.ndim())
        .flat_map(|d| model.matrix(d).iter())
        .map(|x| x * x)
        .sum();
    brute_data_loss(model, tensor) + lambda * norm
}

/// Gradient of the regularized loss with respect to one column.
pub fn gradient(
    model: &FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    entity: usize,
    lam: f64,
) -> Vec<f64> {
    let x = model.column(dim, entity);
    let mut g: Vec<f64> = x.iter().map(|xi| 2.0 * lam * xi).collect();
    for idx in cells_of(model, dim, entity) {
        let v = other_product(model, dim, &idx);
        let (t, w) = target_and_weight(tensor, &idx);
        let pred: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
        for (gk, vk) in g.iter_mut().zip(&v) {
            *gk -= 2.0 * w * (t - pred) * vk;
        }
    }
    g
}

/// Every example of a column's slice for coordinate descent: inputs
/// (column-major), targets and weights.
pub fn enumerated_examples(
    model: &FactorModel,
    tensor: &SparseTensor,
    dim: usize,
    entity: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut a, mut b, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for idx in cells_of(model, dim, entity) {
        a.extend(other_product(model, dim, &idx));
        let (t, wt) = target_and_weight(tensor, &idx);
        b.push(t);
        w.push(wt);
    }
    (a, b, w)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}
