//! Feature co-occurrence graphs and their symmetric normalization.
//!
//! Every feature is a node. Two features share an (unweighted) edge when they
//! are active in the same instance and their fields are selected for the
//! graph. Convolution uses `D̃^{-1/2} (A + I) D̃^{-1/2}`, so self-loops are
//! never stored and are added back by [`FeatureGraph::normalize`].

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{FeatureSpace, SparseInstance};

/// Fields with fewer features than this trigger a warning when included.
pub const DEFAULT_LOW_CARDINALITY: usize = 10;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("feature index {index} out of range for {num_nodes} nodes")]
    IndexOutOfRange { index: usize, num_nodes: usize },
    #[error("unknown field id {0}")]
    UnknownField(usize),
    #[error("field pair ({0}, {1}) uses a field that is not included in the graph")]
    PairOutsideIncluded(usize, usize),
    #[error("pair-list mode needs at least one field pair")]
    NoFieldPairs,
    #[error("sampling ratio {0} is outside [0, 1]")]
    BadRatio(f64),
    #[error("edge list line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Which co-occurring feature pairs become edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphMode {
    /// Every pair of co-occurring features whose fields are both included.
    AllPairs,
    /// Only pairs whose (unordered) field pair is listed.
    PairList(Vec<(usize, usize)>),
}

/// Undirected simple graph over feature indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGraph {
    num_nodes: usize,
    adjacency: Vec<Vec<usize>>,
    /// `None` for graphs read back from an edge list.
    included_fields: Option<BTreeSet<usize>>,
}

impl FeatureGraph {
    /// A graph on `num_nodes` nodes with no edges.
    pub fn empty(num_nodes: usize) -> Self {
        FeatureGraph {
            num_nodes,
            adjacency: vec![Vec::new(); num_nodes],
            included_fields: None,
        }
    }

    /// Builds a graph from undirected edges. Duplicates and orientation are
    /// collapsed; self-edges are rejected.
    pub fn from_edges(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut canon = Vec::new();
        for (a, b) in edges {
            for index in [a, b] {
                if index >= num_nodes {
                    return Err(GraphError::IndexOutOfRange { index, num_nodes });
                }
            }
            if a == b {
                return Err(GraphError::Format {
                    line: 0,
                    msg: format!("self-edge on node {a}"),
                });
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Self::from_sorted_edges(num_nodes, &canon))
    }

    fn from_sorted_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for row in &mut adjacency {
            row.sort_unstable();
        }
        FeatureGraph {
            num_nodes,
            adjacency,
            included_fields: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency
            .get(a)
            .is_some_and(|row| row.binary_search(&b).is_ok())
    }

    pub fn included_fields(&self) -> Option<&BTreeSet<usize>> {
        self.included_fields.as_ref()
    }

    /// Each undirected edge once, as `(low, high)` in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, row)| row.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    /// Histogram of node degrees in power-of-two buckets: bucket 0 holds
    /// degree 0, bucket `k >= 1` holds degrees in `[2^(k-1), 2^k)`.
    pub fn degree_histogram(&self) -> Vec<usize> {
        let mut hist = Vec::new();
        for row in &self.adjacency {
            let bucket = match row.len() {
                0 => 0,
                d => usize::BITS as usize - d.leading_zeros() as usize,
            };
            if hist.len() <= bucket {
                hist.resize(bucket + 1, 0);
            }
            hist[bucket] += 1;
        }
        hist
    }

    /// Computes the propagation coefficients `1 / sqrt(d̃_i d̃_j)` over
    /// `A + I`.
    pub fn normalize(&self) -> NormalizedAdjacency {
        let degrees: Vec<f64> = self
            .adjacency
            .iter()
            .map(|row| (row.len() + 1) as f64)
            .collect();
        let mut row_ptr = Vec::with_capacity(self.num_nodes + 1);
        let mut cols = Vec::with_capacity(self.num_nodes + 2 * self.num_edges());
        let mut coefs = Vec::with_capacity(cols.capacity());
        row_ptr.push(0);
        for (i, row) in self.adjacency.iter().enumerate() {
            let split = row.partition_point(|&j| j < i);
            let neighbors = row[..split]
                .iter()
                .chain(std::iter::once(&i))
                .chain(&row[split..]);
            for &j in neighbors {
                cols.push(j);
                coefs.push(1.0 / (degrees[i] * degrees[j]).sqrt());
            }
            row_ptr.push(cols.len());
        }
        NormalizedAdjacency {
            degrees,
            row_ptr,
            cols,
            coefs,
        }
    }

    /// Writes `nodes m` followed by one `i j` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "nodes {}", self.num_nodes)?;
        for (a, b) in self.edges() {
            writeln!(out, "{a} {b}")?;
        }
        out.flush()
    }

    /// Reads an edge list written by [`write_edge_list`](Self::write_edge_list).
    /// Self-edges, out-of-range endpoints and repeated edges are rejected.
    pub fn read_edge_list<R: Read>(input: R) -> Result<Self> {
        let mut num_nodes = None;
        let mut edges = Vec::new();
        for (n, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let line_no = n + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| GraphError::Format { line: line_no, msg };
            let mut toks = body.split_whitespace();
            let (first, second) = (toks.next(), toks.next());
            if toks.next().is_some() {
                return Err(err(format!("too many columns in `{body}`")));
            }
            match (num_nodes, first, second) {
                (None, Some("nodes"), Some(m)) => {
                    num_nodes = Some(
                        m.parse()
                            .map_err(|_| err(format!("bad node count `{m}`")))?,
                    );
                }
                (None, _, _) => return Err(err("missing `nodes m` header".into())),
                (Some(m), Some(a), Some(b)) => {
                    let a: usize = a.parse().map_err(|_| err(format!("bad node `{a}`")))?;
                    let b: usize = b.parse().map_err(|_| err(format!("bad node `{b}`")))?;
                    if a == b {
                        return Err(err(format!("self-edge on node {a}")));
                    }
                    if a.max(b) >= m {
                        return Err(err(format!("node {} out of range for {m} nodes", a.max(b))));
                    }
                    edges.push(((a.min(b), a.max(b)), line_no));
                }
                (Some(_), _, _) => return Err(err(format!("expected `i j`, got `{body}`"))),
            }
        }
        let num_nodes = num_nodes.ok_or(GraphError::Format {
            line: 0,
            msg: "missing `nodes m` header".into(),
        })?;
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0].0 == w[1].0) {
            let (a, b) = w[1].0;
            return Err(GraphError::Format {
                line: w[1].1,
                msg: format!("edge {a} {b} listed twice"),
            });
        }
        let edges: Vec<_> = edges.into_iter().map(|(e, _)| e).collect();
        Ok(Self::from_sorted_edges(num_nodes, &edges))
    }
}

/// Sparse symmetric matrix `D̃^{-1/2} (A + I) D̃^{-1/2}` in compressed-row
/// form. Every row contains its diagonal entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    degrees: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    coefs: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.degrees.len()
    }

    /// `d̃_i`, the degree of node `i` counting its self-loop.
    pub fn degree(&self, node: usize) -> f64 {
        self.degrees[node]
    }

    /// Neighbors of `node` in `A + I` with their coefficients, ascending.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[node]..self.row_ptr[node + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.coefs[span].iter().copied())
    }

    pub fn coefficient(&self, a: usize, b: usize) -> Option<f64> {
        let span = self.row_ptr[a]..self.row_ptr[a + 1];
        self.cols[span.clone()]
            .binary_search(&b)
            .ok()
            .map(|k| self.coefs[span.start + k])
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

/// Ids of included fields whose cardinality is below `threshold`.
pub fn low_cardinality_fields(
    space: &FeatureSpace,
    included_fields: &[usize],
    threshold: usize,
) -> Vec<usize> {
    included_fields
        .iter()
        .copied()
        .filter(|&f| f < space.num_fields() && space.cardinality(f) < threshold)
        .collect()
}

/// Builds the co-occurrence graph for `instances` restricted to
/// `included_fields`. Small fields turn into hubs; see
/// [`low_cardinality_fields`].
pub fn build_graph(
    instances: &[SparseInstance],
    space: &FeatureSpace,
    mode: &GraphMode,
    included_fields: &[usize],
) -> Result<FeatureGraph> {
    let num_nodes = space.num_features();
    let num_fields = space.num_fields();
    let mut included = vec![false; num_fields];
    for &f in included_fields {
        *included.get_mut(f).ok_or(GraphError::UnknownField(f))? = true;
    }
    let mut allowed = vec![false; num_fields * num_fields];
    match mode {
        GraphMode::AllPairs => {
            for a in 0..num_fields {
                for b in 0..num_fields {
                    allowed[a * num_fields + b] = included[a] && included[b];
                }
            }
        }
        GraphMode::PairList(pairs) => {
            if pairs.is_empty() {
                return Err(GraphError::NoFieldPairs);
            }
            for &(a, b) in pairs {
                if a >= num_fields || b >= num_fields {
                    return Err(GraphError::UnknownField(a.max(b)));
                }
                if !included[a] || !included[b] {
                    return Err(GraphError::PairOutsideIncluded(a, b));
                }
                allowed[a * num_fields + b] = true;
                allowed[b * num_fields + a] = true;
            }
        }
    }

    let edges = instances
        .par_iter()
        .try_fold(Vec::new, |mut acc, inst| {
            let mut nodes = Vec::with_capacity(inst.len());
            for index in inst.indices() {
                let field = space
                    .field_of(index)
                    .ok_or(GraphError::IndexOutOfRange { index, num_nodes })?;
                if included[field] {
                    nodes.push((index, field));
                }
            }
            for (k, &(a, fa)) in nodes.iter().enumerate() {
                for &(b, fb) in &nodes[k + 1..] {
                    if allowed[fa * num_fields + fb] {
                        acc.push((a, b));
                    }
                }
            }
            Ok::<_, GraphError>(acc)
        })
        .try_reduce(Vec::new, |mut a, b| {
            a.extend(b);
            Ok(a)
        })?;

    let mut edges = edges;
    edges.par_sort_unstable();
    edges.dedup();
    let mut graph = FeatureGraph::from_sorted_edges(num_nodes, &edges);
    graph.included_fields = Some(included_fields.iter().copied().collect());
    Ok(graph)
}

fn kept_count(ratio: f64, degree: usize) -> usize {
    // tolerance keeps exact products such as 0.1 * 30 from rounding up
    let want = (ratio * degree as f64 - 1e-9).ceil().max(0.0) as usize;
    want.min(degree)
}

/// Per-node neighbor choices: node `i` keeps `ceil(ratio * deg(i))` of its
/// neighbors, drawn uniformly without replacement.
fn kept_neighbors(graph: &FeatureGraph, ratio: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .adjacency
        .iter()
        .map(|row| {
            let keep = kept_count(ratio, row.len());
            if keep == 0 {
                return Vec::new();
            }
            index::sample(&mut rng, row.len(), keep)
                .into_iter()
                .map(|k| row[k])
                .collect()
        })
        .collect()
}

/// Keeps `ceil(ratio * deg)` uniformly chosen neighbors per node. An edge
/// survives if either endpoint kept it.
pub fn sample_neighbors(graph: &FeatureGraph, ratio: f64, seed: u64) -> Result<FeatureGraph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(GraphError::BadRatio(ratio));
    }
    if ratio == 1.0 {
        return Ok(graph.clone());
    }
    let mut kept: Vec<(usize, usize)> = kept_neighbors(graph, ratio, seed)
        .into_iter()
        .enumerate()
        .flat_map(|(a, row)| row.into_iter().map(move |b| (a.min(b), a.max(b))))
        .collect();
    kept.sort_unstable();
    kept.dedup();
    let mut sampled = FeatureGraph::from_sorted_edges(graph.num_nodes, &kept);
    sampled.included_fields = graph.included_fields.clone();
    Ok(sampled)
}
