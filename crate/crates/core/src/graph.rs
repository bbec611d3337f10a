//! Immutable CSR graphs with node features and labels, plus the structural
//! measurements used throughout the crate: adjacency spectral radius, edge
//! homophily, connected components and the self-loop normalized adjacency.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DEFAULT_RADIUS_TOL: f64 = 1e-8;
pub const DEFAULT_RADIUS_MAX_ITERS: usize = 10_000;

/// A graph over nodes `0..N` stored as out-arc CSR rows, together with its
/// in-arc transpose. Self-loops and duplicate arcs are removed on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    num_nodes: usize,
    out_offsets: Vec<usize>,
    out_targets: Vec<usize>,
    in_offsets: Vec<usize>,
    in_sources: Vec<usize>,
    directed: bool,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    node_ids: Vec<u64>,
}

impl SparseGraph {
    /// Builds a graph from arcs `(src, dst)`.
    ///
    /// For undirected graphs every arc is mirrored, so each edge may be listed
    /// once or in both directions. `node_ids` defaults to `0..N`.
    pub fn new(
        num_nodes: usize,
        arcs: &[(usize, usize)],
        directed: bool,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        node_ids: Option<Vec<u64>>,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                features.nrows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidGraph(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let node_ids = node_ids.unwrap_or_else(|| (0..num_nodes as u64).collect());
        if node_ids.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} node ids for {num_nodes} nodes",
                node_ids.len()
            )));
        }

        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(arcs.len() * if directed { 1 } else { 2 });
        for &(s, d) in arcs {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "arc ({s}, {d}) references a node outside [0, {num_nodes})"
                )));
            }
            if s == d {
                continue;
            }
            pairs.push((s, d));
            if !directed {
                pairs.push((d, s));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let (out_offsets, out_targets) = build_csr(num_nodes, pairs.iter().copied());
        let mut reversed: Vec<(usize, usize)> = pairs.iter().map(|&(s, d)| (d, s)).collect();
        reversed.sort_unstable();
        let (in_offsets, in_sources) = build_csr(num_nodes, reversed.into_iter());

        Ok(Self {
            num_nodes,
            out_offsets,
            out_targets,
            in_offsets,
            in_sources,
            directed,
            features,
            labels,
            num_classes,
            node_ids,
        })
    }

    /// Structure-only graph: no features, every node labelled 0.
    pub fn from_edges(num_nodes: usize, arcs: &[(usize, usize)], directed: bool) -> Result<Self> {
        Self::new(
            num_nodes,
            arcs,
            directed,
            Array2::zeros((num_nodes, 0)),
            vec![0; num_nodes],
            1,
            None,
        )
    }

    /// Replaces the node features, keeping structure and labels.
    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.num_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                self.num_nodes
            )));
        }
        self.features = features;
        Ok(self)
    }

    /// Replaces the labels, keeping structure and features.
    pub fn with_labels(mut self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != self.num_nodes || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::InvalidGraph("labels do not fit the graph".into()));
        }
        self.labels = labels;
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored arcs.
    pub fn num_arcs(&self) -> usize {
        self.out_targets.len()
    }

    /// Number of unordered node pairs joined by at least one arc.
    pub fn num_edges(&self) -> usize {
        self.undirected_pairs().len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    /// CSR offsets of the out-arc rows.
    pub fn offsets(&self) -> &[usize] {
        &self.out_offsets
    }

    /// Targets of the arcs leaving `v`.
    pub fn out_neighbors(&self, v: usize) -> &[usize] {
        &self.out_targets[self.out_offsets[v]..self.out_offsets[v + 1]]
    }

    /// Sources of the arcs entering `v`.
    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.in_sources[self.in_offsets[v]..self.in_offsets[v + 1]]
    }

    /// All stored arcs in row order.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |v| self.out_neighbors(v).iter().map(move |&t| (v, t)))
    }

    /// Unordered pairs `(u, v)` with `u < v`, deduplicated.
    pub fn undirected_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.arcs().map(|(s, d)| (s.min(d), s.max(d))).collect()
    }

    /// The 0/1 adjacency matrix of the stored arcs.
    pub fn adjacency(&self) -> CsrMatrix {
        CsrMatrix::from_raw(
            self.num_nodes,
            self.num_nodes,
            self.out_offsets.clone(),
            self.out_targets.clone(),
            vec![1.0; self.out_targets.len()],
        )
    }

    /// Induced subgraph on `keep` (sorted, unique); indices are compacted in order.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(Error::NodeOutOfRange {
                    node: old,
                    num_nodes: self.num_nodes,
                });
            }
            remap[old] = new;
        }
        let arcs: Vec<(usize, usize)> = self
            .arcs()
            .filter(|&(s, d)| remap[s] != usize::MAX && remap[d] != usize::MAX)
            .map(|(s, d)| (remap[s], remap[d]))
            .collect();
        Self::new(
            keep.len(),
            &arcs,
            self.directed,
            self.features.select(Axis(0), keep),
            keep.iter().map(|&v| self.labels[v]).collect(),
            self.num_classes,
            Some(keep.iter().map(|&v| self.node_ids[v]).collect()),
        )
    }
}

fn build_csr(num_nodes: usize, sorted_pairs: impl Iterator<Item = (usize, usize)>) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; num_nodes + 1];
    let mut targets = Vec::new();
    for (s, d) in sorted_pairs {
        offsets[s + 1] += 1;
        targets.push(d);
    }
    for i in 0..num_nodes {
        offsets[i + 1] += offsets[i];
    }
    (offsets, targets)
}

/// Summary statistics of a graph as reported for benchmark datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_nodes: usize,
    /// Unordered node pairs.
    pub num_edges: usize,
    /// Stored arcs (twice `num_edges` for undirected graphs).
    pub num_arcs: usize,
    pub spectral_radius: f64,
    pub edge_homophily: f64,
    pub num_features: usize,
    pub num_classes: usize,
}

/// Dominant eigenvalue magnitude of the adjacency matrix by power iteration.
///
/// Iterates on `A + I` from the all-ones vector so that bipartite graphs (whose
/// spectrum is symmetric about zero) still have a unique dominant eigenvalue.
/// For undirected graphs the estimate is the Rayleigh quotient, otherwise the
/// norm growth of the normalized iterate; both converge to `ρ(A) + 1` for
/// nonnegative `A`. Stops when successive estimates differ by less than `tol`.
pub fn spectral_radius(g: &SparseGraph, tol: f64, max_iters: usize) -> Result<f64> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if g.num_arcs() == 0 {
        return Ok(0.0);
    }

    let mut x = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut y = Array1::zeros(n);
    let mut previous = f64::NAN;
    for _ in 0..max_iters {
        for v in 0..n {
            y[v] = x[v] + g.out_neighbors(v).iter().map(|&t| x[t]).sum::<f64>();
        }
        let norm = y.dot(&y).sqrt();
        let estimate = if g.is_directed() { norm } else { x.dot(&y) };
        if (estimate - previous).abs() < tol {
            return Ok(estimate - 1.0);
        }
        previous = estimate;
        x.assign(&y);
        x /= norm;
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        estimate: previous - 1.0,
    })
}

/// Fraction of unordered edges whose endpoints carry the same label.
pub fn edge_homophily(g: &SparseGraph) -> Result<f64> {
    let pairs = g.undirected_pairs();
    if pairs.is_empty() {
        return Err(Error::NoEdges);
    }
    let labels = g.labels();
    let same = pairs.iter().filter(|&&(u, v)| labels[u] == labels[v]).count();
    Ok(same as f64 / pairs.len() as f64)
}

/// Weakly connected components, each sorted ascending, in order of their smallest node.
pub fn connected_components(g: &SparseGraph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let mut component = vec![usize::MAX; n];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for root in 0..n {
        if component[root] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![root];
        component[root] = id;
        stack.push(root);
        while let Some(v) = stack.pop() {
            for &u in g.out_neighbors(v).iter().chain(g.in_neighbors(v)) {
                if component[u] == usize::MAX {
                    component[u] = id;
                    members.push(u);
                    stack.push(u);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Subgraph induced on the largest weakly connected component.
///
/// Ties between equally large components go to the one holding the smallest
/// original node identifier.
pub fn largest_connected_component(g: &SparseGraph) -> Result<SparseGraph> {
    let ids = g.node_ids();
    let best = connected_components(g).into_iter().max_by(|a, b| {
        let min_id = |c: &[usize]| c.iter().map(|&v| ids[v]).min().unwrap_or(u64::MAX);
        a.len().cmp(&b.len()).then_with(|| min_id(b).cmp(&min_id(a)))
    });
    match best {
        Some(keep) => g.induced_subgraph(&keep),
        None => Ok(g.clone()),
    }
}

/// Symmetrizes the arc set.
pub fn to_undirected(g: &SparseGraph) -> SparseGraph {
    let arcs: Vec<(usize, usize)> = g.arcs().collect();
    SparseGraph::new(
        g.num_nodes(),
        &arcs,
        false,
        g.features().clone(),
        g.labels().to_vec(),
        g.num_classes(),
        Some(g.node_ids().to_vec()),
    )
    .expect("arcs of a valid graph stay valid")
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` holds the degrees of `A + I`.
pub fn normalized_adjacency(g: &SparseGraph) -> Result<CsrMatrix> {
    if g.is_directed() {
        return Err(Error::InvalidArgument(
            "normalized adjacency requires an undirected graph".into(),
        ));
    }
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| 1.0 / ((g.out_neighbors(v).len() + 1) as f64).sqrt())
        .collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(g.num_arcs() + n);
    let mut values = Vec::with_capacity(g.num_arcs() + n);
    indptr.push(0);
    for v in 0..n {
        let neighbors = g.out_neighbors(v);
        let split = neighbors.partition_point(|&u| u < v);
        let row = neighbors[..split]
            .iter()
            .copied()
            .chain(std::iter::once(v))
            .chain(neighbors[split..].iter().copied());
        for u in row {
            indices.push(u);
            values.push(inv_sqrt[v] * inv_sqrt[u]);
        }
        indptr.push(indices.len());
    }
    Ok(CsrMatrix::from_raw(n, n, indptr, indices, values))
}

pub fn graph_stats(g: &SparseGraph) -> Result<GraphStats> {
    Ok(GraphStats {
        num_nodes: g.num_nodes(),
        num_edges: g.num_edges(),
        num_arcs: g.num_arcs(),
        spectral_radius: spectral_radius(g, DEFAULT_RADIUS_TOL, DEFAULT_RADIUS_MAX_ITERS)?,
        edge_homophily: edge_homophily(g)?,
        num_features: g.num_features(),
        num_classes: g.num_classes(),
    })
}
