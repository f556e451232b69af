//! Squared-error objective with L2 penalty and its analytic gradient.
//!
//! For one instance with embeddings `e_i` (after dropout) and
//! `s_f = Σ_j e_jf x_j`, the prediction's partials are
//! `∂ŷ/∂w0 = 1`, `∂ŷ/∂w_i = x_i` and `∂ŷ/∂e_if = x_i (s_f − e_if x_i)`.
//! The embedding partials are then pushed through the dropout mask and the
//! convolution stack by [`EmbeddingView::backward`].

use std::borrow::Borrow;

use crate::data::SparseInstance;
use crate::graph::NormalizedAdjacency;
use crate::matrix::Matrix;
use crate::model::{self, score_with_view, EmbeddingView, ModelParams, Result};

use super::dropout::{apply_dropout, DropoutMask};

/// Rows of a matrix gradient; rows not listed are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub indices: Vec<usize>,
    pub values: Matrix,
}

impl SparseRows {
    pub fn row(&self, index: usize) -> Option<&[f64]> {
        self.indices
            .binary_search(&index)
            .ok()
            .map(|k| self.values.row(k))
    }
}

/// `∂L/∂Θ` in the same layout as [`ModelParams`], sparse in the
/// per-feature parts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub bias: f64,
    /// Sorted by feature index.
    pub linear: Vec<(usize, f64)>,
    /// Gradient of the `m × d` table, restricted to rows that received any.
    pub table: SparseRows,
    /// Dense gradients of the `d × d` layer weights, layer 2 first.
    pub deep: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros(params: &ModelParams) -> Self {
        GradientSet {
            bias: 0.0,
            linear: Vec::new(),
            table: SparseRows {
                indices: Vec::new(),
                values: Matrix::zeros(0, params.dim()),
            },
            deep: params.weights[1..]
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn linear_at(&self, index: usize) -> f64 {
        self.linear
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |k| self.linear[k].1)
    }

    pub fn table_at(&self, row: usize, col: usize) -> f64 {
        self.table.row(row).map_or(0.0, |r| r[col])
    }
}

/// Which parameters the L2 gradient reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecayScope {
    /// Only rows touched by the batch (plus the dense layer weights).
    #[default]
    Touched,
    /// Every parameter, matching the penalty in [`loss`] exactly.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub lambda: f64,
    /// Whether `w0` and `w` are penalised.
    pub include_bias: bool,
    pub scope: DecayScope,
}

impl Regularization {
    pub fn new(lambda: f64) -> Self {
        Regularization {
            lambda,
            include_bias: true,
            scope: DecayScope::Touched,
        }
    }

    pub fn none() -> Self {
        Self::new(0.0)
    }

    pub fn full(lambda: f64) -> Self {
        Regularization {
            scope: DecayScope::Full,
            ..Self::new(lambda)
        }
    }

    pub fn penalty(&self, params: &ModelParams) -> f64 {
        if self.lambda == 0.0 {
            0.0
        } else {
            self.lambda * params.squared_norm(self.include_bias)
        }
    }
}

/// Dropout settings for one forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutDraw {
    pub ratio: f64,
    pub seed: u64,
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchStep {
    /// `Σ (ŷ − y)² + λ‖Θ‖²` with the dropout used for the gradient.
    pub loss: f64,
    pub predictions: Vec<f64>,
    pub grads: GradientSet,
}

fn batch_nodes<B: Borrow<SparseInstance>>(batch: &[B]) -> Vec<usize> {
    let mut nodes: Vec<usize> = batch.iter().flat_map(|x| x.borrow().indices()).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

fn forward<B: Borrow<SparseInstance>>(
    batch: &[B],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    dropout: Option<DropoutDraw>,
) -> Result<(EmbeddingView, EmbeddingView, Option<DropoutMask>)> {
    let view = model::embed(params, norm, &batch_nodes(batch))?;
    match dropout {
        Some(d) if d.ratio > 0.0 => {
            let (dropped, mask) = apply_dropout(&view, d.ratio, d.seed);
            Ok((view, dropped, Some(mask)))
        }
        _ => {
            let same = view.clone();
            Ok((view, same, None))
        }
    }
}

/// `Σ_batch (ŷ − y)² + λ‖Θ‖²`, no dropout.
pub fn loss<B: Borrow<SparseInstance>>(
    batch: &[B],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    reg: &Regularization,
) -> Result<f64> {
    objective(batch, params, norm, reg, None)
}

/// Like [`loss`] but with the given dropout draw applied to the embeddings.
pub fn objective<B: Borrow<SparseInstance>>(
    batch: &[B],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    reg: &Regularization,
    dropout: Option<DropoutDraw>,
) -> Result<f64> {
    params.check_graph(norm)?;
    let (_, view, _) = forward(batch, params, norm, dropout)?;
    let sse: f64 = batch
        .iter()
        .map(|x| {
            let x = x.borrow();
            let r = score_with_view(x, params, &view) - x.label;
            r * r
        })
        .sum();
    Ok(sse + reg.penalty(params))
}

/// Gradient of [`objective`] for the same dropout draw.
pub fn backward<B: Borrow<SparseInstance>>(
    batch: &[B],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    reg: &Regularization,
    dropout: Option<DropoutDraw>,
) -> Result<GradientSet> {
    forward_backward(batch, params, norm, reg, dropout).map(|s| s.grads)
}

/// Loss, predictions and gradient in one pass.
pub fn forward_backward<B: Borrow<SparseInstance>>(
    batch: &[B],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    reg: &Regularization,
    dropout: Option<DropoutDraw>,
) -> Result<BatchStep> {
    params.check_graph(norm)?;
    let (clean, view, mask) = forward(batch, params, norm, dropout)?;
    let dim = params.dim();
    let num_rows = view.nodes().len();

    let mut d_bias = 0.0;
    let mut d_linear = vec![0.0; num_rows];
    let mut d_rows = Matrix::zeros(num_rows, dim);
    let mut sum = vec![0.0; dim];
    let mut predictions = Vec::with_capacity(batch.len());
    let mut sse = 0.0;

    for x in batch {
        let x = x.borrow();
        let y_hat = score_with_view(x, params, &view);
        let r = y_hat - x.label;
        sse += r * r;
        predictions.push(y_hat);
        let g = 2.0 * r;
        d_bias += g;

        sum.fill(0.0);
        for &(i, xi) in x.entries() {
            let e = view.row(i).expect("view covers the batch");
            for (s, &v) in sum.iter_mut().zip(e) {
                *s += v * xi;
            }
        }
        for &(i, xi) in x.entries() {
            let k = view.position(i).expect("view covers the batch");
            d_linear[k] += g * xi;
            let e = view.rows().row(k).to_vec();
            let out = d_rows.row_mut(k);
            for f in 0..dim {
                out[f] += g * xi * (sum[f] - e[f] * xi);
            }
        }
    }
    if let Some(mask) = &mask {
        mask.apply(&mut d_rows);
    }

    let (d_table, deep) = clean.backward(params, norm, &d_rows);
    let mut grads = GradientSet {
        bias: d_bias,
        linear: view.nodes().iter().copied().zip(d_linear).collect(),
        table: SparseRows {
            indices: clean.input_nodes().to_vec(),
            values: d_table,
        },
        deep,
    };
    add_decay(&mut grads, params, reg);
    Ok(BatchStep {
        loss: sse + reg.penalty(params),
        predictions,
        grads,
    })
}

fn add_decay(grads: &mut GradientSet, params: &ModelParams, reg: &Regularization) {
    if reg.lambda == 0.0 {
        return;
    }
    let two_lambda = 2.0 * reg.lambda;
    if reg.scope == DecayScope::Full {
        densify(grads, params, reg.include_bias);
    }
    if reg.include_bias {
        grads.bias += two_lambda * params.bias;
        for (i, g) in &mut grads.linear {
            *g += two_lambda * params.linear[*i];
        }
    }
    let table = params.embedding_table();
    for (k, &i) in grads.table.indices.iter().enumerate() {
        for (g, w) in grads.table.values.row_mut(k).iter_mut().zip(table.row(i)) {
            *g += two_lambda * w;
        }
    }
    for (g, w) in grads.deep.iter_mut().zip(&params.weights[1..]) {
        for (gv, wv) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *gv += two_lambda * wv;
        }
    }
}

/// Expands the sparse parts to cover every feature.
fn densify(grads: &mut GradientSet, params: &ModelParams, linear_too: bool) {
    let m = params.num_features();
    let dim = params.dim();
    if linear_too {
        let mut dense: Vec<(usize, f64)> = (0..m).map(|i| (i, 0.0)).collect();
        for &(i, g) in &grads.linear {
            dense[i].1 = g;
        }
        grads.linear = dense;
    }
    let mut values = Matrix::zeros(m, dim);
    for (k, &i) in grads.table.indices.iter().enumerate() {
        values.row_mut(i).copy_from_slice(grads.table.values.row(k));
    }
    grads.table = SparseRows {
        indices: (0..m).collect(),
        values,
    };
}
