//! Independent reference implementations shared by the integration tests.
//! Nothing here goes through the O(d·m) reformulation or the sparse
//! convolution code it checks.

#![allow(dead_code)]

use gemfm::graph::NormalizedAdjacency;
use gemfm::matrix::Matrix;
use gemfm::train::{objective, DropoutDraw, GradientSet, Regularization};
use gemfm::{ModelParams, SparseInstance};
use rand::Rng;

/// `Σ_{i<j} x_i x_j ⟨e_i, e_j⟩` by direct double loop.
pub fn pairwise_interaction(entries: &[(usize, f64)], embed: impl Fn(usize) -> Vec<f64>) -> f64 {
    let mut total = 0.0;
    for a in 0..entries.len() {
        for b in a + 1..entries.len() {
            let (i, xi) = entries[a];
            let (j, xj) = entries[b];
            let (ei, ej) = (embed(i), embed(j));
            let inner: f64 = ei.iter().zip(&ej).map(|(p, q)| p * q).sum();
            total += xi * xj * inner;
        }
    }
    total
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |r, c| {
        (0..a.cols()).map(|k| a.get(r, k) * b.get(k, c)).sum()
    })
}

/// Full `G_L` via dense products with the explicit `m × m` adjacency.
pub fn dense_gcn(norm: &NormalizedAdjacency, params: &ModelParams) -> Matrix {
    let n = norm.num_nodes();
    let a = Matrix::from_fn(n, n, |i, j| norm.coefficient(i, j).unwrap_or(0.0));
    let act = |m: Matrix| {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            params.activation.apply(m.get(r, c))
        })
    };
    let mut g = act(matmul(&a, &params.weights[0]));
    for w in &params.weights[1..] {
        g = act(matmul(&matmul(&a, &g), w));
    }
    g
}

/// Brute-force score: bias + linear + pairwise double sum over the given
/// embedding table.
pub fn brute_score(instance: &SparseInstance, params: &ModelParams, table: &Matrix) -> f64 {
    let linear: f64 = instance
        .entries()
        .iter()
        .map(|&(i, x)| params.linear[i] * x)
        .sum();
    params.bias + linear + pairwise_interaction(instance.entries(), |i| table.row(i).to_vec())
}

pub fn brute_fm_score(instance: &SparseInstance, params: &ModelParams) -> f64 {
    brute_score(instance, params, &params.weights[0])
}

pub fn brute_gem_score(
    instance: &SparseInstance,
    norm: &NormalizedAdjacency,
    params: &ModelParams,
) -> f64 {
    brute_score(instance, params, &dense_gcn(norm, params))
}

/// Number of scalar parameters, in the order used by [`coord_mut`].
pub fn num_coords(params: &ModelParams) -> usize {
    params.param_count()
}

/// Flat access: bias, linear weights, then each weight matrix row-major.
pub fn coord_mut(params: &mut ModelParams, k: usize) -> &mut f64 {
    if k == 0 {
        return &mut params.bias;
    }
    let mut k = k - 1;
    if k < params.linear.len() {
        return &mut params.linear[k];
    }
    k -= params.linear.len();
    for w in &mut params.weights {
        let len = w.as_slice().len();
        if k < len {
            return &mut w.as_mut_slice()[k];
        }
        k -= len;
    }
    panic!("coordinate out of range");
}

/// The analytic gradient entry matching [`coord_mut`]'s layout.
pub fn grad_coord(grads: &GradientSet, params: &ModelParams, k: usize) -> f64 {
    if k == 0 {
        return grads.bias;
    }
    let mut k = k - 1;
    if k < params.linear.len() {
        return grads.linear_at(k);
    }
    k -= params.linear.len();
    let table_len = params.weights[0].as_slice().len();
    if k < table_len {
        let d = params.dim();
        return grads.table_at(k / d, k % d);
    }
    k -= table_len;
    for g in &grads.deep {
        let len = g.as_slice().len();
        if k < len {
            return g.as_slice()[k];
        }
        k -= len;
    }
    panic!("coordinate out of range");
}

#[derive(Debug, Clone, Copy)]
pub struct Mismatch {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences of [`objective`] on every coordinate, compared with
/// `analytic` at `rel` relative tolerance and `abs` absolute floor.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    batch: &[SparseInstance],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    reg: &Regularization,
    dropout: Option<DropoutDraw>,
    analytic: &GradientSet,
    h: f64,
    rel: f64,
    abs: f64,
) -> Result<usize, Mismatch> {
    let mut probe = params.clone();
    let n = num_coords(params);
    for k in 0..n {
        let orig = *coord_mut(&mut probe, k);
        *coord_mut(&mut probe, k) = orig + h;
        let plus = objective(batch, &probe, norm, reg, dropout).unwrap();
        *coord_mut(&mut probe, k) = orig - h;
        let minus = objective(batch, &probe, norm, reg, dropout).unwrap();
        *coord_mut(&mut probe, k) = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = grad_coord(analytic, params, k);
        let tol = (rel * a.abs().max(numeric.abs())).max(abs);
        if (a - numeric).abs() > tol {
            return Err(Mismatch {
                coord: k,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(n)
}

/// Random instance over `[0, m)` with `1..=max_active` distinct features.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    m: usize,
    max_active: usize,
    value_range: f64,
) -> SparseInstance {
    let k = rng.gen_range(1..=max_active.min(m));
    let picks = rand::seq::index::sample(rng, m, k);
    let entries = picks
        .into_iter()
        .map(|i| (i, rng.gen_range(-value_range..=value_range)))
        .collect();
    SparseInstance::new(rng.gen_range(-1.0..=1.0), entries).unwrap()
}

/// Fills every parameter uniformly from `[-scale, scale]`.
pub fn randomize<R: Rng>(rng: &mut R, params: &mut ModelParams, scale: f64) {
    for k in 0..num_coords(params) {
        *coord_mut(params, k) = rng.gen_range(-scale..=scale);
    }
}

/// Random simple graph with `edges` distinct edges.
pub fn random_edges<R: Rng>(rng: &mut R, m: usize, edges: usize) -> Vec<(usize, usize)> {
    let mut out = std::collections::BTreeSet::new();
    let max = m * (m - 1) / 2;
    while out.len() < edges.min(max) {
        let a = rng.gen_range(0..m);
        let b = rng.gen_range(0..m);
        if a != b {
            out.insert((a.min(b), a.max(b)));
        }
    }
    out.into_iter().collect()
}
