//! Input sensitivity of message-passing stacks.
//!
//! For an untrained GCN `H(l) = relu(Â H(l-1) W(l)ᵀ)` the Jacobian of node
//! `v`'s layer-`ℓ` representation with respect to the input features of node
//! `u` obeys
//!
//! ```text
//! ‖∂h_v(ℓ) / ∂x_u‖ ≤ Π_l ‖W(l)‖ · (Â^ℓ)_{v,u}
//! ```
//!
//! This module computes both sides: the left by central finite differences
//! against any black-box embedding map (GCN or reservoir), the right from
//! operator 2-norms and sparse powers of `Â`.

use std::io::Write;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::linalg;
use crate::reservoir::{self, ReservoirConfig, ReservoirWeights};
use crate::sparse::CsrMatrix;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Layer weights of an untrained GCN together with the propagation matrix.
#[derive(Debug, Clone)]
pub struct GcnStack {
    layer_weights: Vec<Array2<f64>>,
    normalized_adjacency: CsrMatrix,
}

impl GcnStack {
    /// `layer_weights[0]` is `H1 × X`, each later layer maps the previous width.
    pub fn new(layer_weights: Vec<Array2<f64>>, normalized_adjacency: CsrMatrix) -> Result<Self> {
        if layer_weights.is_empty() {
            return Err(Error::InvalidArgument("a GCN stack needs at least one layer".into()));
        }
        for (l, pair) in layer_weights.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} outputs {} units but layer {} expects {}",
                    l + 1,
                    pair[0].nrows(),
                    l + 2,
                    pair[1].ncols()
                )));
            }
        }
        if normalized_adjacency.nrows() != normalized_adjacency.ncols() {
            return Err(Error::DimensionMismatch("propagation matrix must be square".into()));
        }
        Ok(Self {
            layer_weights,
            normalized_adjacency,
        })
    }

    pub fn depth(&self) -> usize {
        self.layer_weights.len()
    }

    pub fn layer_weights(&self) -> &[Array2<f64>] {
        &self.layer_weights
    }

    pub fn normalized_adjacency(&self) -> &CsrMatrix {
        &self.normalized_adjacency
    }

    /// `Π_l ‖W(l)‖₂`.
    pub fn lipschitz_product(&self) -> f64 {
        self.layer_weights
            .iter()
            .map(|w| linalg::operator_norm(w.view()))
            .product()
    }
}

/// Forward pass from `features` (`N × X`) to the last layer (`N × H`).
pub fn gcn_forward(stack: &GcnStack, features: &Array2<f64>) -> Result<Array2<f64>> {
    if features.nrows() != stack.normalized_adjacency.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for a {}-node propagation matrix",
            features.nrows(),
            stack.normalized_adjacency.ncols()
        )));
    }
    if features.ncols() != stack.layer_weights[0].ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} input features, first layer expects {}",
            features.ncols(),
            stack.layer_weights[0].ncols()
        )));
    }
    let mut h = features.clone();
    for w in &stack.layer_weights {
        let transformed = h.dot(&w.t());
        h = stack.normalized_adjacency.matmul_dense(&transformed)?;
        h.mapv_inplace(|v| v.max(0.0));
    }
    Ok(h)
}

/// `(M^depth)_{v, source}` by repeated sparse products on the indicator of `source`.
pub fn adjacency_power_entry(matrix: &CsrMatrix, depth: usize, v: usize, source: usize) -> Result<f64> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::DimensionMismatch("matrix power of a non-square matrix".into()));
    }
    for node in [v, source] {
        if node >= n {
            return Err(Error::NodeOutOfRange { node, num_nodes: n });
        }
    }
    let mut x = Array1::zeros(n);
    x[source] = 1.0;
    for _ in 0..depth {
        x = matrix.matvec(x.view())?;
    }
    Ok(x[v])
}

/// Finite-difference Jacobian `∂ state_v / ∂ x_source` (`H × X`).
///
/// `embed` maps an `N × X` feature matrix to node-major states (`N × H`).
/// Columns are central differences with step `epsilon` and are evaluated in parallel.
pub fn empirical_jacobian<F>(
    embed: F,
    features: &Array2<f64>,
    v: usize,
    source: usize,
    epsilon: f64,
) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync,
{
    let (n, x_dim) = features.dim();
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    for node in [v, source] {
        if node >= n {
            return Err(Error::NodeOutOfRange { node, num_nodes: n });
        }
    }
    let columns: Vec<Array1<f64>> = (0..x_dim)
        .into_par_iter()
        .map(|j| {
            let mut plus = features.clone();
            plus[[source, j]] += epsilon;
            let mut minus = features.clone();
            minus[[source, j]] -= epsilon;
            let up = embed(&plus)?;
            let down = embed(&minus)?;
            if up.nrows() != n || down.nrows() != n {
                return Err(Error::DimensionMismatch("embedding must return one row per node".into()));
            }
            let col = (&up.row(v) - &down.row(v)) / (2.0 * epsilon);
            if col.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("finite difference for feature {j}")));
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;

    let h = match columns.first() {
        Some(c) => c.len(),
        None => embed(features)?.ncols(),
    };
    let mut jac = Array2::zeros((h, x_dim));
    for (j, col) in columns.into_iter().enumerate() {
        jac.column_mut(j).assign(&col);
    }
    Ok(jac)
}

/// Operator 2-norm of [`empirical_jacobian`].
pub fn empirical_jacobian_norm<F>(embed: F, g: &SparseGraph, v: usize, source: usize, epsilon: f64) -> Result<f64>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync,
{
    let jac = empirical_jacobian(embed, g.features(), v, source, epsilon)?;
    Ok(linalg::operator_norm(jac.view()))
}

/// Reservoir embedding map over the structure of `g`, for finite differencing.
pub fn reservoir_embed_fn<'a>(
    g: &'a SparseGraph,
    w: &'a ReservoirWeights,
    cfg: &'a ReservoirConfig,
) -> impl Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync + 'a {
    move |features: &Array2<f64>| {
        let perturbed = g.clone().with_features(features.clone())?;
        let e = reservoir::compute_embeddings(&perturbed, w, cfg)?;
        Ok(e.node_major().to_owned())
    }
}

/// GCN embedding map, for finite differencing.
pub fn gcn_embed_fn(stack: &GcnStack) -> impl Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync + '_ {
    move |features: &Array2<f64>| gcn_forward(stack, features)
}

/// Both sides of the sensitivity bound for one node pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub source: usize,
    pub target: usize,
    pub depth: usize,
    pub jacobian_norm: f64,
    pub bound: f64,
    pub adjacency_mass: f64,
}

impl SensitivityReport {
    /// Whether the measured norm respects the bound up to `slack`.
    pub fn holds(&self, slack: f64) -> bool {
        self.jacobian_norm <= self.bound + slack
    }
}

/// Measures `‖∂h_target / ∂x_source‖` on `g`'s features and the matching bound.
pub fn sensitivity_report(g: &SparseGraph, stack: &GcnStack, target: usize, source: usize) -> Result<SensitivityReport> {
    let depth = stack.depth();
    let adjacency_mass = adjacency_power_entry(&stack.normalized_adjacency, depth, target, source)?;
    let jacobian_norm = empirical_jacobian_norm(gcn_embed_fn(stack), g, target, source, DEFAULT_EPSILON)?;
    Ok(SensitivityReport {
        source,
        target,
        depth,
        jacobian_norm,
        bound: stack.lipschitz_product() * adjacency_mass,
        adjacency_mass,
    })
}

pub const REPORT_CSV_HEADER: &str = "source,target,depth,jacobian_norm,bound,adjacency_mass";

pub fn write_reports_csv<W: Write>(mut out: W, reports: &[SensitivityReport]) -> std::io::Result<()> {
    writeln!(out, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.source, r.target, r.depth, r.jacobian_norm, r.bound, r.adjacency_mass
        )?;
    }
    Ok(())
}
