//! Factorization-machine scoring with lookup or graph-convolved embeddings.
//!
//! Both scorers share the same second-order term,
//! `½ Σ_f [(Σ_i e_if x_i)² − Σ_i e_if² x_i²]`, and differ only in where the
//! embedding `e_i` comes from:
//!
//! * `num_layers == 0`: row `i` of the embedding table `W1` (plain FM);
//! * `num_layers >= 1`: row `i` of `G_L`, where
//!   `G_1 = σ(Â W1)` and `G_l = σ(Â G_{l-1} W_l)` with `Â` the normalized
//!   co-occurrence adjacency.
//!
//! With one layer the parameter set is exactly FM's, and an edgeless graph
//! with identity activation reproduces FM bit for bit.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::SparseInstance;
use crate::graph::NormalizedAdjacency;
use crate::matrix::{axpy, Matrix};

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GEMFM\0\0\x01";

/// Standard deviation of the normal used to initialise weight matrices.
pub const INIT_STDDEV: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature index {index} out of range for a model with {num_features} features")]
    IndexOutOfRange { index: usize, num_features: usize },
    #[error("model has {layers} graph layer(s) but no normalized graph was supplied")]
    MissingGraph { layers: usize },
    #[error("a graph was supplied to a plain FM model (0 layers)")]
    UnexpectedGraph,
    #[error("graph has {graph} nodes but the model has {model} features")]
    GraphSize { graph: usize, model: usize },
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative evaluated at the pre-activation value. ReLU uses 0 at 0.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(ModelError::UnknownActivation(other.to_string())),
        }
    }
}

/// All trainable parameters.
///
/// `weights[0]` is the `m × d` matrix that is the FM embedding table when
/// `num_layers == 0` and the first convolution weight otherwise. For
/// `num_layers >= 2`, `weights[l - 1]` is the `d × d` weight of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub bias: f64,
    pub linear: Vec<f64>,
    pub weights: Vec<Matrix>,
    pub activation: Activation,
    num_layers: usize,
}

impl ModelParams {
    pub fn zeros(
        num_features: usize,
        dim: usize,
        num_layers: usize,
        activation: Activation,
    ) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let mut weights = vec![Matrix::zeros(num_features, dim)];
        for _ in 1..num_layers {
            weights.push(Matrix::zeros(dim, dim));
        }
        ModelParams {
            bias: 0.0,
            linear: vec![0.0; num_features],
            weights,
            activation,
            num_layers,
        }
    }

    /// Zero biases and `N(0, 0.01²)` weight matrices.
    pub fn init(
        num_features: usize,
        dim: usize,
        num_layers: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut params = Self::zeros(num_features, dim, num_layers, activation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
        for w in &mut params.weights {
            for v in w.as_mut_slice() {
                *v = normal.sample(&mut rng);
            }
        }
        params
    }

    pub fn num_features(&self) -> usize {
        self.linear.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn is_gem(&self) -> bool {
        self.num_layers >= 1
    }

    /// The `m × d` table (FM embeddings, or the first convolution weight).
    pub fn embedding_table(&self) -> &Matrix {
        &self.weights[0]
    }

    /// `1 + m + m·d + (L − 1)·d²` for `L >= 1`, and `1 + m + m·d` for FM.
    pub fn param_count(&self) -> usize {
        1 + self.linear.len()
            + self
                .weights
                .iter()
                .map(|w| w.rows() * w.cols())
                .sum::<usize>()
    }

    /// `‖Θ‖²`, optionally leaving out the global and per-feature biases.
    pub fn squared_norm(&self, include_bias: bool) -> f64 {
        let weights: f64 = self.weights.iter().map(Matrix::squared_norm).sum();
        if include_bias {
            self.bias * self.bias + self.linear.iter().map(|w| w * w).sum::<f64>() + weights
        } else {
            weights
        }
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.num_features() {
            return Err(ModelError::IndexOutOfRange {
                index,
                num_features: self.num_features(),
            });
        }
        Ok(())
    }

    /// Checks `norm` against the layer count: required iff `num_layers >= 1`.
    pub fn check_graph(&self, norm: Option<&NormalizedAdjacency>) -> Result<()> {
        match (self.is_gem(), norm) {
            (true, None) => Err(ModelError::MissingGraph {
                layers: self.num_layers,
            }),
            (false, Some(_)) => Err(ModelError::UnexpectedGraph),
            (true, Some(n)) if n.num_nodes() != self.num_features() => Err(ModelError::GraphSize {
                graph: n.num_nodes(),
                model: self.num_features(),
            }),
            _ => Ok(()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }

    /// Little-endian layout: magic, `m`, `d`, `L` (u64), activation name
    /// (u32 length + UTF-8), `w0`, `w[m]`, then each weight matrix row-major.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_u64::<LittleEndian>(self.num_features() as u64)?;
        out.write_u64::<LittleEndian>(self.dim() as u64)?;
        out.write_u64::<LittleEndian>(self.num_layers as u64)?;
        let name = self.activation.name().as_bytes();
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name)?;
        out.write_f64::<LittleEndian>(self.bias)?;
        for &v in self
            .linear
            .iter()
            .chain(self.weights.iter().flat_map(|w| w.as_slice()))
        {
            out.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
        let eof = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => bad("file is truncated"),
            _ => ModelError::Io(e),
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(eof)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic header"));
        }
        let m = input.read_u64::<LittleEndian>().map_err(eof)? as usize;
        let d = input.read_u64::<LittleEndian>().map_err(eof)? as usize;
        let layers = input.read_u64::<LittleEndian>().map_err(eof)? as usize;
        if d == 0 {
            return Err(bad("embedding dimension is zero"));
        }
        let name_len = input.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if name_len > 64 {
            return Err(bad("activation name too long"));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(eof)?;
        let activation: Activation = std::str::from_utf8(&name)
            .map_err(|_| bad("activation name is not UTF-8"))?
            .parse()?;
        m.checked_mul(d)
            .and_then(|md| d.checked_mul(d)?.checked_mul(layers)?.checked_add(md))
            .ok_or_else(|| bad("shape overflows"))?;

        let mut params = ModelParams::zeros(m, d, layers, activation);
        params.bias = input.read_f64::<LittleEndian>().map_err(eof)?;
        input
            .read_f64_into::<LittleEndian>(&mut params.linear)
            .map_err(eof)?;
        for w in &mut params.weights {
            input
                .read_f64_into::<LittleEndian>(w.as_mut_slice())
                .map_err(eof)?;
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(params)
    }
}

/// The second-order FM term for `entries`, in `O(d · |entries|)`.
pub fn fm_interaction<'a>(entries: &[(usize, f64)], embed: impl Fn(usize) -> &'a [f64]) -> f64 {
    let Some(&(first, _)) = entries.first() else {
        return 0.0;
    };
    let dim = embed(first).len();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = 0.0;
    for &(i, x) in entries {
        let e = embed(i);
        for (s, &v) in sum.iter_mut().zip(e) {
            let t = v * x;
            *s += t;
            sum_sq += t * t;
        }
    }
    0.5 * (sum.iter().map(|s| s * s).sum::<f64>() - sum_sq)
}

fn linear_part(instance: &SparseInstance, params: &ModelParams) -> f64 {
    params.bias
        + instance
            .entries()
            .iter()
            .map(|&(i, x)| params.linear[i] * x)
            .sum::<f64>()
}

/// FM prediction using rows of the embedding table.
pub fn fm_score(instance: &SparseInstance, params: &ModelParams) -> Result<f64> {
    for i in instance.indices() {
        params.check_index(i)?;
    }
    let table = params.embedding_table();
    Ok(linear_part(instance, params) + fm_interaction(instance.entries(), |i| table.row(i)))
}

/// Prediction with embeddings taken from `view`, which must cover the
/// instance's features.
pub fn score_with_view(
    instance: &SparseInstance,
    params: &ModelParams,
    view: &EmbeddingView,
) -> f64 {
    linear_part(instance, params)
        + fm_interaction(instance.entries(), |i| {
            view.row(i)
                .expect("embedding view covers every active feature")
        })
}

/// GEM prediction: FM scoring over graph-convolved embeddings.
pub fn gem_score(
    instance: &SparseInstance,
    norm: &NormalizedAdjacency,
    params: &ModelParams,
) -> Result<f64> {
    let nodes: Vec<usize> = instance.indices().collect();
    let view = gcn_embed(norm, params, &nodes)?;
    Ok(score_with_view(instance, params, &view))
}

/// Scores a batch (no dropout). `norm` must be present iff the model has
/// graph layers.
pub fn predict_batch(
    instances: &[SparseInstance],
    norm: Option<&NormalizedAdjacency>,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    params.check_graph(norm)?;
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let mut nodes: Vec<usize> = instances.iter().flat_map(|x| x.indices()).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let view = embed(params, norm, &nodes)?;
    Ok(instances
        .par_iter()
        .map(|x| score_with_view(x, params, &view))
        .collect())
}

/// Nodes touched at one layer, with a lookup from node to row.
#[derive(Debug, Clone, Default)]
pub struct Frontier {
    nodes: Vec<usize>,
    pos: HashMap<usize, usize>,
}

impl Frontier {
    fn new(mut nodes: Vec<usize>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let pos = nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
        Frontier { nodes, pos }
    }

    fn expand(&self, norm: &NormalizedAdjacency) -> Self {
        Frontier::new(
            self.nodes
                .iter()
                .flat_map(|&i| norm.row(i).map(|(j, _)| j))
                .collect(),
        )
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.pos.get(&node).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Values kept from the forward pass of one convolution layer.
#[derive(Debug, Clone)]
struct LayerCache {
    /// `Σ_j c(i,j) G_{l-1}[j]`; absent for the first layer, whose input is
    /// the identity basis.
    aggregated: Option<Matrix>,
    pre_activation: Matrix,
}

/// Embedding rows for a set of nodes, plus whatever the backward pass needs.
#[derive(Debug, Clone)]
pub struct EmbeddingView {
    /// `frontiers[l]` holds the nodes whose layer-`l` output is needed;
    /// the last entry is the requested set.
    frontiers: Vec<Frontier>,
    layers: Vec<LayerCache>,
    rows: Matrix,
}

impl EmbeddingView {
    pub fn nodes(&self) -> &[usize] {
        self.frontiers
            .last()
            .expect("at least one frontier")
            .nodes()
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.frontiers.last().and_then(|f| f.position(node))
    }

    pub fn row(&self, node: usize) -> Option<&[f64]> {
        self.position(node).map(|k| self.rows.row(k))
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Matrix {
        &mut self.rows
    }

    /// Nodes whose `W1` row influences this view.
    pub fn input_nodes(&self) -> &[usize] {
        self.frontiers[0].nodes()
    }

    /// Back-propagates `d_rows` (gradient w.r.t. the view's rows) into the
    /// weight matrices. Returns the `W1` gradient for [`input_nodes`] and
    /// dense gradients for each deeper layer.
    ///
    /// [`input_nodes`]: Self::input_nodes
    pub fn backward(
        &self,
        params: &ModelParams,
        norm: Option<&NormalizedAdjacency>,
        d_rows: &Matrix,
    ) -> (Matrix, Vec<Matrix>) {
        let dim = params.dim();
        let num_layers = params.num_layers();
        let mut deep = Vec::with_capacity(num_layers.saturating_sub(1));
        if num_layers == 0 {
            let mut d_table = Matrix::zeros(d_rows.rows(), dim);
            for k in 0..d_rows.rows() {
                axpy(1.0, d_rows.row(k), d_table.row_mut(k));
            }
            return (d_table, deep);
        }
        let norm = norm.expect("graph layers need a normalized adjacency");
        let act = params.activation;
        let mut d_out = d_rows.clone();
        for layer in (1..=num_layers).rev() {
            let cache = &self.layers[layer - 1];
            let here = &self.frontiers[layer];
            let below = &self.frontiers[layer - 1];
            let mut d_pre = d_out;
            if act != Activation::Identity {
                for (g, &p) in d_pre
                    .as_mut_slice()
                    .iter_mut()
                    .zip(cache.pre_activation.as_slice())
                {
                    *g *= act.derivative(p);
                }
            }
            let mut d_below = Matrix::zeros(below.len(), dim);
            if let Some(agg) = &cache.aggregated {
                let weight = &params.weights[layer - 1];
                let mut d_weight = Matrix::zeros(dim, dim);
                let mut d_agg = vec![0.0; dim];
                for (k, &i) in here.nodes().iter().enumerate() {
                    d_weight.add_outer(agg.row(k), d_pre.row(k));
                    weight.mul_vec(d_pre.row(k), &mut d_agg);
                    for (j, c) in norm.row(i) {
                        axpy(c, &d_agg, d_below.row_mut(below.pos[&j]));
                    }
                }
                deep.push(d_weight);
            } else {
                for (k, &i) in here.nodes().iter().enumerate() {
                    for (j, c) in norm.row(i) {
                        axpy(c, d_pre.row(k), d_below.row_mut(below.pos[&j]));
                    }
                }
            }
            d_out = d_below;
        }
        deep.reverse();
        (d_out, deep)
    }
}

/// Lookup embeddings (`num_layers == 0`) or graph-convolved ones.
pub fn embed(
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
    nodes: &[usize],
) -> Result<EmbeddingView> {
    params.check_graph(norm)?;
    match norm {
        Some(norm) => gcn_embed(norm, params, nodes),
        None => lookup_embed(params, nodes),
    }
}

fn lookup_embed(params: &ModelParams, nodes: &[usize]) -> Result<EmbeddingView> {
    for &i in nodes {
        params.check_index(i)?;
    }
    let frontier = Frontier::new(nodes.to_vec());
    let table = params.embedding_table();
    let mut rows = Matrix::zeros(frontier.len(), params.dim());
    for (k, &i) in frontier.nodes().iter().enumerate() {
        rows.row_mut(k).copy_from_slice(table.row(i));
    }
    Ok(EmbeddingView {
        frontiers: vec![frontier],
        layers: Vec::new(),
        rows,
    })
}

/// Runs the convolution stack for `nodes` only, touching just their
/// `L`-hop neighborhoods.
pub fn gcn_embed(
    norm: &NormalizedAdjacency,
    params: &ModelParams,
    nodes: &[usize],
) -> Result<EmbeddingView> {
    let num_layers = params.num_layers();
    if num_layers == 0 {
        return Err(ModelError::UnexpectedGraph);
    }
    if norm.num_nodes() != params.num_features() {
        return Err(ModelError::GraphSize {
            graph: norm.num_nodes(),
            model: params.num_features(),
        });
    }
    for &i in nodes {
        params.check_index(i)?;
    }

    let mut frontiers = vec![Frontier::new(nodes.to_vec())];
    for _ in 0..num_layers {
        let next = frontiers.last().unwrap().expand(norm);
        frontiers.push(next);
    }
    frontiers.reverse();

    let dim = params.dim();
    let act = params.activation;
    let mut layers = Vec::with_capacity(num_layers);
    let mut prev_out = Matrix::zeros(0, dim);
    for layer in 1..=num_layers {
        let here = &frontiers[layer];
        let below = &frontiers[layer - 1];
        let mut pre = Matrix::zeros(here.len(), dim);
        let aggregated = if layer == 1 {
            let table = params.embedding_table();
            for (k, &i) in here.nodes().iter().enumerate() {
                let out = pre.row_mut(k);
                for (j, c) in norm.row(i) {
                    axpy(c, table.row(j), out);
                }
            }
            None
        } else {
            let mut agg = Matrix::zeros(here.len(), dim);
            let weight = &params.weights[layer - 1];
            for (k, &i) in here.nodes().iter().enumerate() {
                let out = agg.row_mut(k);
                for (j, c) in norm.row(i) {
                    axpy(c, prev_out.row(below.pos[&j]), out);
                }
                weight.vec_mul(agg.row(k), pre.row_mut(k));
            }
            Some(agg)
        };
        let mut out = pre.clone();
        if act != Activation::Identity {
            out.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = act.apply(*v));
        }
        layers.push(LayerCache {
            aggregated,
            pre_activation: pre,
        });
        prev_out = out;
    }
    Ok(EmbeddingView {
        frontiers,
        layers,
        rows: prev_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FeatureGraph;
    use approx::assert_relative_eq;

    /// Σ_{i<j} x_i x_j ⟨e_i, e_j⟩ by direct enumeration.
    fn pairwise(entries: &[(usize, f64)], embed: impl Fn(usize) -> Vec<f64>) -> f64 {
        let mut total = 0.0;
        for a in 0..entries.len() {
            for b in a + 1..entries.len() {
                let (i, xi) = entries[a];
                let (j, xj) = entries[b];
                let ei = embed(i);
                let ej = embed(j);
                total += xi * xj * ei.iter().zip(&ej).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        total
    }

    fn inst(label: f64, entries: &[(usize, f64)]) -> SparseInstance {
        SparseInstance::new(label, entries.to_vec()).unwrap()
    }

    #[test]
    fn interaction_small_cases() {
        let table = [
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, -1.0],
        ];
        let e = |i: usize| table[i].as_slice();
        assert_eq!(fm_interaction(&[(0, 1.0)], e), 0.0);
        assert_eq!(fm_interaction(&[], e), 0.0);
        assert_eq!(fm_interaction(&[(0, 1.0), (1, 1.0)], e), 0.0);
        // x = (2, 3), e = (1,1) and (1,-1)
        assert_eq!(fm_interaction(&[(2, 2.0), (3, 3.0)], e), 0.0);
        // x = (2, 3), both e = (1,1): 2·3·2 = 12
        let same = |_: usize| table[2].as_slice();
        assert_eq!(fm_interaction(&[(0, 2.0), (1, 3.0)], same), 12.0);
        let oracle = pairwise(&[(0, 2.0), (1, 3.0)], |_| table[2].clone());
        assert_eq!(oracle, 12.0);
    }

    #[test]
    fn fm_score_cases() {
        let mut p = ModelParams::zeros(3, 2, 0, Activation::Identity);
        let x = inst(1.0, &[(0, 1.0), (1, 2.0), (2, -0.5)]);
        assert_eq!(fm_score(&x, &p).unwrap(), 0.0);
        p.bias = 0.5;
        assert_eq!(fm_score(&x, &p).unwrap(), 0.5);
        assert_eq!(fm_score(&inst(0.0, &[(1, 7.0)]), &p).unwrap(), 0.5);

        p.linear = vec![0.1, -0.2, 0.3];
        p.weights[0] = Matrix::from_vec(3, 2, vec![0.5, 1.0, -1.0, 2.0, 0.25, 0.75]);
        let table = p.weights[0].clone();
        let direct = 0.5
            + (0.1 * 1.0 - 0.2 * 2.0 + 0.3 * -0.5)
            + pairwise(x.entries(), |i| table.row(i).to_vec());
        assert_relative_eq!(fm_score(&x, &p).unwrap(), direct, max_relative = 1e-12);
        assert!(matches!(
            fm_score(&inst(0.0, &[(3, 1.0)]), &p),
            Err(ModelError::IndexOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn param_counts() {
        assert_eq!(
            ModelParams::zeros(2, 2, 0, Activation::Identity).param_count(),
            7
        );
        assert_eq!(
            ModelParams::zeros(2, 2, 1, Activation::Identity).param_count(),
            7
        );
        assert_eq!(
            ModelParams::zeros(2, 2, 2, Activation::Identity).param_count(),
            11
        );
    }

    #[test]
    fn gcn_edgeless_identity_is_lookup() {
        let p = ModelParams::init(4, 3, 1, Activation::Identity, 9);
        let norm = FeatureGraph::empty(4).normalize();
        let view = gcn_embed(&norm, &p, &[2, 0]).unwrap();
        assert_eq!(view.nodes(), &[0, 2]);
        for i in [0, 2] {
            assert_eq!(view.row(i).unwrap(), p.weights[0].row(i));
        }
        assert!(view.row(1).is_none());
    }

    #[test]
    fn gcn_two_connected_nodes_average() {
        let mut p = ModelParams::zeros(2, 2, 1, Activation::Identity);
        p.weights[0] = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, -4.0]);
        let norm = FeatureGraph::from_edges(2, [(0, 1)]).unwrap().normalize();
        let view = gcn_embed(&norm, &p, &[0, 1]).unwrap();
        for i in 0..2 {
            assert_eq!(view.row(i).unwrap(), &[2.0, -1.0]);
        }
    }

    #[test]
    fn gcn_relu_clamps_negative() {
        let mut p = ModelParams::zeros(3, 2, 1, Activation::Relu);
        p.weights[0] = Matrix::from_fn(3, 2, |r, c| -1.0 - (r + c) as f64);
        let norm = FeatureGraph::empty(3).normalize();
        let view = gcn_embed(&norm, &p, &[0, 1, 2]).unwrap();
        assert!(view.rows().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_rejects_bad_input() {
        let p = ModelParams::zeros(3, 2, 1, Activation::Identity);
        let norm = FeatureGraph::empty(3).normalize();
        assert!(matches!(
            gcn_embed(&norm, &p, &[3]),
            Err(ModelError::IndexOutOfRange { index: 3, .. })
        ));
        let wrong = FeatureGraph::empty(4).normalize();
        assert!(matches!(
            gcn_embed(&wrong, &p, &[0]),
            Err(ModelError::GraphSize { .. })
        ));
        let fm = ModelParams::zeros(3, 2, 0, Activation::Identity);
        assert!(gcn_embed(&norm, &fm, &[0]).is_err());
    }

    /// Dense `Â` for a small graph.
    fn dense_adjacency(norm: &NormalizedAdjacency) -> Matrix {
        let n = norm.num_nodes();
        Matrix::from_fn(n, n, |i, j| norm.coefficient(i, j).unwrap_or(0.0))
    }

    /// Full-matrix convolution stack, written independently of `gcn_embed`.
    fn dense_gcn(norm: &NormalizedAdjacency, p: &ModelParams) -> Matrix {
        let a = dense_adjacency(norm);
        let n = a.rows();
        let d = p.dim();
        let matmul = |x: &Matrix, y: &Matrix| {
            Matrix::from_fn(x.rows(), y.cols(), |r, c| {
                (0..x.cols()).map(|k| x.get(r, k) * y.get(k, c)).sum()
            })
        };
        let act =
            |m: Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| p.activation.apply(m.get(r, c)));
        let mut g = act(matmul(&a, &p.weights[0]));
        for w in &p.weights[1..] {
            g = act(matmul(&matmul(&a, &g), w));
        }
        assert_eq!((g.rows(), g.cols()), (n, d));
        g
    }

    #[test]
    fn gcn_matches_dense_reference() {
        let g = FeatureGraph::from_edges(6, [(0, 1), (1, 2), (2, 3), (0, 4), (4, 2)]).unwrap();
        let norm = g.normalize();
        for (layers, act) in [
            (1, Activation::Identity),
            (1, Activation::Relu),
            (2, Activation::Identity),
            (2, Activation::Relu),
            (3, Activation::Relu),
        ] {
            let mut p = ModelParams::init(6, 4, layers, act, 5);
            // larger weights so relu actually cuts
            for w in &mut p.weights {
                w.as_mut_slice().iter_mut().for_each(|v| *v *= 100.0);
            }
            let dense = dense_gcn(&norm, &p);
            let view = gcn_embed(&norm, &p, &[3, 5]).unwrap();
            for i in [3, 5] {
                for (a, b) in view.row(i).unwrap().iter().zip(dense.row(i)) {
                    assert_relative_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn gem_score_three_node_oracle() {
        // path 0 - 1 - 2, hand-set W1
        let norm = FeatureGraph::from_edges(3, [(0, 1), (1, 2)])
            .unwrap()
            .normalize();
        let mut p = ModelParams::zeros(3, 2, 1, Activation::Identity);
        p.bias = 0.2;
        p.linear = vec![0.5, -1.0, 0.25];
        p.weights[0] = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.5, -2.0, -1.0, 1.5]);
        let g = dense_gcn(&norm, &p);
        let x = inst(0.0, &[(0, 1.0), (1, 2.0), (2, -1.0)]);
        let expected = 0.2 + 0.5 - 2.0 - 0.25 + pairwise(x.entries(), |i| g.row(i).to_vec());
        assert_relative_eq!(
            gem_score(&x, &norm, &p).unwrap(),
            expected,
            max_relative = 1e-12
        );

        p.bias = 0.0;
        p.linear = vec![0.0; 3];
        p.weights[0] = Matrix::zeros(3, 2);
        assert_eq!(gem_score(&x, &norm, &p).unwrap(), 0.0);
    }

    #[test]
    fn gem_on_edgeless_graph_equals_fm() {
        let mut p = ModelParams::init(5, 4, 1, Activation::Identity, 1);
        p.bias = 0.3;
        p.linear = vec![0.1, 0.2, -0.3, 0.4, 0.0];
        let norm = FeatureGraph::empty(5).normalize();
        let x = inst(1.0, &[(0, 1.0), (2, 0.5), (4, -2.0)]);
        assert_eq!(
            gem_score(&x, &norm, &p).unwrap().to_bits(),
            fm_score(&x, &p).unwrap().to_bits()
        );
    }

    #[test]
    fn predict_batch_matches_single_scores() {
        let g = FeatureGraph::from_edges(5, [(0, 1), (1, 2), (3, 4)]).unwrap();
        let norm = g.normalize();
        let p = ModelParams::init(5, 3, 2, Activation::Relu, 4);
        let batch = vec![
            inst(0.0, &[(0, 1.0), (3, 1.0)]),
            inst(1.0, &[(1, 1.0), (2, 1.0), (4, 0.5)]),
            inst(1.0, &[(1, 1.0), (2, 1.0), (4, 0.5)]),
        ];
        let out = predict_batch(&batch, Some(&norm), &p).unwrap();
        for (x, y) in batch.iter().zip(&out) {
            assert_relative_eq!(gem_score(x, &norm, &p).unwrap(), *y, max_relative = 1e-12);
        }
        assert_eq!(out[1], out[2]);
        assert!(predict_batch(&[], Some(&norm), &p).unwrap().is_empty());
        assert!(matches!(
            predict_batch(&batch, None, &p),
            Err(ModelError::MissingGraph { .. })
        ));

        let fm = ModelParams::init(5, 3, 0, Activation::Identity, 4);
        assert!(matches!(
            predict_batch(&batch, Some(&norm), &fm),
            Err(ModelError::UnexpectedGraph)
        ));
        let out = predict_batch(&batch, None, &fm).unwrap();
        for (x, y) in batch.iter().zip(&out) {
            assert_eq!(fm_score(x, &fm).unwrap(), *y);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let mut p = ModelParams::init(7, 3, 2, Activation::Relu, 2);
        p.bias = -0.75;
        p.linear[3] = 1.5;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"GEMFM\0\0\x01");
        assert_eq!(buf.len(), 8 + 24 + 4 + 4 + 8 * p.param_count());
        assert_eq!(ModelParams::read_checkpoint(buf.as_slice()).unwrap(), p);

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(ModelParams::read_checkpoint(bad_magic.as_slice()).is_err());
        assert!(ModelParams::read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(ModelParams::read_checkpoint(longer.as_slice()).is_err());
    }

    #[test]
    fn activation_parsing() {
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
        assert_eq!(
            "identity".parse::<Activation>().unwrap(),
            Activation::Identity
        );
        assert!("tanh".parse::<Activation>().is_err());
    }
}
