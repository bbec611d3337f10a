//! Independent reference computations for the integration tests. Nothing
//! here calls into the library's numerical code.

#![allow(dead_code)]

use gesn_core::SparseGraph;
use ndarray::{Array1, Array2};
use rand::Rng;

/// Solves `a x = b` for every column of `b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = Array2::zeros((n, n + m));
    for i in 0..n {
        for j in 0..n {
            aug[[i, j]] = a[[i, j]];
        }
        for j in 0..m {
            aug[[i, n + j]] = b[[i, j]];
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[[x, col]].abs().total_cmp(&aug[[y, col]].abs()))
            .unwrap();
        if pivot != col {
            for j in 0..n + m {
                aug.swap([col, j], [pivot, j]);
            }
        }
        let p = aug[[col, col]];
        assert!(p.abs() > 1e-300, "singular system");
        for r in col + 1..n {
            let f = aug[[r, col]] / p;
            if f != 0.0 {
                for j in col..n + m {
                    aug[[r, j]] -= f * aug[[col, j]];
                }
            }
        }
    }
    let mut x = Array2::zeros((n, m));
    for k in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[[i, n + k]];
            for j in i + 1..n {
                s -= aug[[i, j]] * x[[j, k]];
            }
            x[[i, k]] = s / aug[[i, i]];
        }
    }
    x
}

/// Ridge readout from the augmented normal equations
/// `[EEᵀ + λI, E1; 1ᵀEᵀ, N] [Wᵀ; bᵀ] = [EY; 1ᵀY]` with one-hot `Y`.
/// Returns `(W: C × H, b: C)`.
pub fn ridge_oracle(e: &Array2<f64>, labels: &[usize], classes: usize, lambda: f64) -> (Array2<f64>, Array1<f64>) {
    let (h, n) = e.dim();
    let mut z = Array2::zeros((n, h + 1));
    for i in 0..n {
        for j in 0..h {
            z[[i, j]] = e[[j, i]];
        }
        z[[i, h]] = 1.0;
    }
    let mut y = Array2::zeros((n, classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    let mut gram = z.t().dot(&z);
    for j in 0..h {
        gram[[j, j]] += lambda;
    }
    let rhs = z.t().dot(&y);
    let sol = gauss_solve(&gram, &rhs);
    let w = sol.slice(ndarray::s![..h, ..]).t().to_owned();
    let b = sol.row(h).to_owned();
    (w, b)
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn symmetric_radius(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    m.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Largest eigenvalue magnitude of a general square matrix.
pub fn general_radius(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    m.complex_eigenvalues().iter().fold(0.0f64, |acc, v| acc.max(v.norm()))
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    let (r, c) = a.dim();
    let m = nalgebra::DMatrix::from_fn(r, c, |i, j| a[[i, j]]);
    m.singular_values().iter().fold(0.0f64, |acc, v| acc.max(*v))
}

pub fn dense_adjacency(g: &SparseGraph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut a = Array2::zeros((n, n));
    for v in 0..n {
        for &u in g.out_neighbors(v) {
            a[[v, u]] = 1.0;
        }
    }
    a
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected graph.
pub fn dense_normalized_adjacency(g: &SparseGraph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut a = dense_adjacency(g);
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (d[i] * d[j]).sqrt())
}

pub fn matrix_power(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let mut out = Array2::eye(a.nrows());
    for _ in 0..k {
        out = out.dot(a);
    }
    out
}

/// Erdős–Rényi style graph: each unordered (or ordered, if directed) pair present with probability `p`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64, directed: bool) -> SparseGraph {
    let mut arcs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || (!directed && j < i) {
                continue;
            }
            if rng.random_bool(p) {
                arcs.push((i, j));
            }
        }
    }
    SparseGraph::from_edges(n, &arcs, directed).unwrap()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..=scale))
}

/// Forward pass `H(l) = relu(Â H(l-1) W(l)ᵀ)` keeping every pre-activation.
pub fn gcn_preactivations(a_hat: &Array2<f64>, weights: &[Array2<f64>], x: &Array2<f64>) -> Vec<Array2<f64>> {
    let mut h = x.clone();
    let mut pres = Vec::new();
    for w in weights {
        let pre = a_hat.dot(&h.dot(&w.t()));
        h = pre.mapv(|v| v.max(0.0));
        pres.push(pre);
    }
    pres
}

/// Chain-rule Jacobian `∂h_v(L) / ∂x_src` of the GCN stack (`H_L × X`).
pub fn gcn_jacobian(a_hat: &Array2<f64>, weights: &[Array2<f64>], x: &Array2<f64>, v: usize, src: usize) -> Array2<f64> {
    let n = x.nrows();
    let xd = x.ncols();
    let pres = gcn_preactivations(a_hat, weights, x);
    // jac[u] = ∂h_u(l) / ∂x_src
    let mut jac: Vec<Array2<f64>> = (0..n)
        .map(|u| if u == src { Array2::eye(xd) } else { Array2::zeros((xd, xd)) })
        .collect();
    for (w, pre) in weights.iter().zip(&pres) {
        let transformed: Vec<Array2<f64>> = jac.iter().map(|j| w.dot(j)).collect();
        jac = (0..n)
            .map(|u| {
                let mut acc = Array2::zeros((w.nrows(), xd));
                for (t, jt) in transformed.iter().enumerate() {
                    let a = a_hat[[u, t]];
                    if a != 0.0 {
                        acc.scaled_add(a, jt);
                    }
                }
                for (r, mut row) in acc.rows_mut().into_iter().enumerate() {
                    if pre[[u, r]] <= 0.0 {
                        row.fill(0.0);
                    }
                }
                acc
            })
            .collect();
    }
    jac.swap_remove(v)
}

/// Texas-sized stand-in: 183 nodes, 295 undirected edges, 1703 sparse binary
/// features and 5 classes whose labels correlate with a block of features.
pub fn texas_like_graph(seed: u64) -> SparseGraph {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = 183;
    let x_dim = 1703;
    let classes = 5;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut pairs = std::collections::BTreeSet::new();
    while pairs.len() < 295 {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let arcs: Vec<(usize, usize)> = pairs.into_iter().collect();
    let mut x = Array2::zeros((n, x_dim));
    for v in 0..n {
        for _ in 0..30 {
            x[[v, rng.random_range(0..x_dim)]] = 1.0;
        }
        for _ in 0..10 {
            x[[v, labels[v] * 50 + rng.random_range(0..50)]] = 1.0;
        }
    }
    SparseGraph::new(n, &arcs, false, x, labels, classes, None).unwrap()
}
