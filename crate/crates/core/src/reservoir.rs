//! Reservoir construction and the GESN state iteration.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::linalg;

pub const DEFAULT_ITERATIONS: usize = 100;

/// Raw recurrent matrices whose spectral radius falls below this are redrawn.
const DEGENERATE_RADIUS: f64 = 1e-12;

/// Which arcs feed a node's recurrent sum. Irrelevant for undirected graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Sum over sources of arcs entering the node.
    #[default]
    In,
    /// Sum over targets of arcs leaving the node.
    Out,
    /// Sum over the union of both.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirConfig {
    pub units: usize,
    pub input_scaling: f64,
    pub target_radius: f64,
    pub seed: u64,
    /// Iteration cap `K`.
    pub max_iterations: usize,
    /// Stop early once the max-norm state change drops below this; 0 runs exactly `K` steps.
    pub convergence_tol: f64,
    pub aggregation: Aggregation,
}

impl ReservoirConfig {
    pub fn new(units: usize, input_scaling: f64, target_radius: f64, seed: u64) -> Self {
        Self {
            units,
            input_scaling,
            target_radius,
            seed,
            max_iterations: DEFAULT_ITERATIONS,
            convergence_tol: 0.0,
            aggregation: Aggregation::In,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 {
            return Err(Error::InvalidArgument("reservoir needs at least one unit".into()));
        }
        if !(self.input_scaling > 0.0 && self.input_scaling.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "input scaling must be positive, got {}",
                self.input_scaling
            )));
        }
        if !(self.target_radius > 0.0 && self.target_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "target radius must be positive, got {}",
                self.target_radius
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "convergence tolerance must be nonnegative, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Unscaled reservoir draw: entries uniform in `[-1, 1]` and the spectral
/// radius of the recurrent part. Rescaling it is exact, so one draw serves
/// every (input scaling, radius) pair of a grid.
#[derive(Debug, Clone)]
pub struct ReservoirDraw {
    w_in: Array2<f64>,
    w_hat: Array2<f64>,
    raw_radius: f64,
    seed: u64,
}

impl ReservoirDraw {
    pub fn new(seed: u64, units: usize, num_features: usize) -> Result<Self> {
        if units == 0 {
            return Err(Error::InvalidArgument("reservoir needs at least one unit".into()));
        }
        let mut seed = seed;
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w_in = Array2::from_shape_fn((units, num_features), |_| rng.random_range(-1.0..=1.0));
            let w_hat = Array2::from_shape_fn((units, units), |_| rng.random_range(-1.0..=1.0));
            let raw_radius = linalg::spectral_radius(w_hat.view())?;
            if raw_radius >= DEGENERATE_RADIUS {
                return Ok(Self {
                    w_in,
                    w_hat,
                    raw_radius,
                    seed,
                });
            }
            log::warn!("recurrent draw with seed {seed} has spectral radius {raw_radius:e}; redrawing");
            seed = seed.wrapping_add(1);
        }
    }

    pub fn raw_radius(&self) -> f64 {
        self.raw_radius
    }

    /// Seed that produced this draw (differs from the requested one after a redraw).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scaled(&self, input_scaling: f64, target_radius: f64) -> ReservoirWeights {
        let rho = self.raw_radius;
        ReservoirWeights {
            w_in: self.w_in.mapv(|v| v * input_scaling),
            w_hat: self.w_hat.mapv(|v| v / rho * target_radius),
            // ρ(cM) = |c|·ρ(M), so the rescaled radius is the target up to the raw estimate.
            achieved_radius: target_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirWeights {
    /// Input weights, `H × X`.
    pub w_in: Array2<f64>,
    /// Recurrent weights, `H × H`.
    pub w_hat: Array2<f64>,
    /// Spectral radius of `w_hat` as implied by the estimate of the raw draw.
    pub achieved_radius: f64,
}

impl ReservoirWeights {
    pub fn units(&self) -> usize {
        self.w_hat.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.w_in.ncols()
    }
}

pub fn init_reservoir(cfg: &ReservoirConfig, num_features: usize) -> Result<ReservoirWeights> {
    cfg.validate()?;
    Ok(ReservoirDraw::new(cfg.seed, cfg.units, num_features)?.scaled(cfg.input_scaling, cfg.target_radius))
}

/// Node states after some number of iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `H × N`; column `v` is the state of node `v`. Entries lie in `[-1, 1]`,
    /// reaching the endpoints only where `tanh` saturates in floating point.
    pub states: Array2<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Max-norm of the last state change.
    pub final_delta: f64,
}

impl EmbeddingMatrix {
    pub fn units(&self) -> usize {
        self.states.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.states.ncols()
    }

    /// `N × H` view, one row per node.
    pub fn node_major(&self) -> ArrayView2<'_, f64> {
        self.states.t()
    }
}

/// Neighbor lists selected by an [`Aggregation`] mode, in CSR form.
struct NeighborIndex {
    offsets: Vec<usize>,
    nodes: Vec<usize>,
}

impl NeighborIndex {
    fn new(g: &SparseGraph, mode: Aggregation) -> Self {
        let mut offsets = Vec::with_capacity(g.num_nodes() + 1);
        let mut nodes = Vec::new();
        offsets.push(0);
        for v in 0..g.num_nodes() {
            match (mode, g.is_directed()) {
                (Aggregation::Out, true) => nodes.extend_from_slice(g.out_neighbors(v)),
                (Aggregation::Both, true) => {
                    let mut merged: Vec<usize> = g.in_neighbors(v).iter().chain(g.out_neighbors(v)).copied().collect();
                    merged.sort_unstable();
                    merged.dedup();
                    nodes.extend(merged);
                }
                _ => nodes.extend_from_slice(g.in_neighbors(v)),
            }
            offsets.push(nodes.len());
        }
        Self { offsets, nodes }
    }

    fn of(&self, v: usize) -> &[usize] {
        &self.nodes[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// Synchronous iteration of the state recurrence, node-major (`N × H`) internally.
struct StateIteration<'a> {
    input_drive: Array2<f64>,
    w_hat: &'a Array2<f64>,
    neighbors: NeighborIndex,
    active: Vec<usize>,
    state: Array2<f64>,
    state_is_zero: bool,
    iteration: usize,
    last_delta: f64,
}

impl<'a> StateIteration<'a> {
    fn new(g: &SparseGraph, w: &'a ReservoirWeights, cfg: &ReservoirConfig, initial: Option<ArrayView2<'_, f64>>) -> Result<Self> {
        if g.num_features() != w.num_features() {
            return Err(Error::DimensionMismatch(format!(
                "graph has {} features, input weights expect {}",
                g.num_features(),
                w.num_features()
            )));
        }
        let h = w.units();
        let n = g.num_nodes();
        let state = match initial {
            Some(init) => {
                if init.dim() != (h, n) {
                    return Err(Error::DimensionMismatch(format!(
                        "initial state is {:?}, expected ({h}, {n})",
                        init.dim()
                    )));
                }
                init.t().to_owned()
            }
            None => Array2::zeros((n, h)),
        };
        let state_is_zero = state.iter().all(|&v| v == 0.0);
        let neighbors = NeighborIndex::new(g, cfg.aggregation);
        let active = (0..n).filter(|&v| !neighbors.of(v).is_empty()).collect();
        let input_drive = linalg::parallel_mul_transposed(g.features().view(), w.w_in.view());
        Ok(Self {
            input_drive,
            w_hat: &w.w_hat,
            neighbors,
            active,
            state,
            state_is_zero,
            iteration: 0,
            last_delta: f64::INFINITY,
        })
    }

    fn step(&mut self) -> Result<()> {
        let mut next = self.input_drive.clone();
        if !self.state_is_zero && !self.active.is_empty() {
            let h = self.state.ncols();
            let mut gathered = Array2::zeros((self.active.len(), h));
            for (mut row, &v) in gathered.rows_mut().into_iter().zip(&self.active) {
                for &u in self.neighbors.of(v) {
                    row += &self.state.row(u);
                }
            }
            let recurrent = linalg::parallel_mul_transposed(gathered.view(), self.w_hat.view());
            for (r, &v) in recurrent.rows().into_iter().zip(&self.active) {
                let mut row = next.row_mut(v);
                row += &r;
            }
        }
        next.par_mapv_inplace(f64::tanh);
        self.iteration += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                iteration: self.iteration,
            });
        }
        let mut delta = 0.0f64;
        Zip::from(&next).and(&self.state).for_each(|a, b| delta = delta.max((a - b).abs()));
        self.last_delta = delta;
        self.state_is_zero = next.iter().all(|&v| v == 0.0);
        self.state = next;
        Ok(())
    }

    fn snapshot(&self, converged: bool) -> EmbeddingMatrix {
        EmbeddingMatrix {
            states: self.state.clone().reversed_axes(),
            iterations_run: self.iteration,
            converged,
            final_delta: if self.iteration == 0 { 0.0 } else { self.last_delta },
        }
    }

    fn into_embeddings(self, converged: bool) -> EmbeddingMatrix {
        let final_delta = if self.iteration == 0 { 0.0 } else { self.last_delta };
        EmbeddingMatrix {
            // Transposed view of node-major storage: H × N without copying.
            states: self.state.reversed_axes(),
            iterations_run: self.iteration,
            converged,
            final_delta,
        }
    }
}

/// Iterates the recurrence from the zero state for `cfg.max_iterations` steps
/// (or until the state change falls below `cfg.convergence_tol` when positive).
pub fn compute_embeddings(g: &SparseGraph, w: &ReservoirWeights, cfg: &ReservoirConfig) -> Result<EmbeddingMatrix> {
    run(StateIteration::new(g, w, cfg, None)?, cfg)
}

/// Same as [`compute_embeddings`] but starting from `initial` (`H × N`).
pub fn compute_embeddings_from(
    g: &SparseGraph,
    w: &ReservoirWeights,
    cfg: &ReservoirConfig,
    initial: ArrayView2<'_, f64>,
) -> Result<EmbeddingMatrix> {
    run(StateIteration::new(g, w, cfg, Some(initial))?, cfg)
}

fn run(mut it: StateIteration<'_>, cfg: &ReservoirConfig) -> Result<EmbeddingMatrix> {
    let tol = cfg.convergence_tol;
    while it.iteration < cfg.max_iterations {
        it.step()?;
        if tol > 0.0 && it.last_delta < tol {
            return Ok(it.into_embeddings(true));
        }
    }
    let converged = it.iteration > 0 && (it.last_delta == 0.0 || (tol > 0.0 && it.last_delta < tol));
    Ok(it.into_embeddings(converged))
}

/// States at the requested iteration counts, taken from a single run.
///
/// `checkpoints` must be non-decreasing and not exceed `cfg.max_iterations`;
/// repeated entries yield equal snapshots. Once the run converges (positive
/// tolerance) later snapshots repeat the converged state.
pub fn state_trajectory(
    g: &SparseGraph,
    w: &ReservoirWeights,
    cfg: &ReservoirConfig,
    checkpoints: &[usize],
) -> Result<Vec<EmbeddingMatrix>> {
    if checkpoints.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::InvalidArgument("checkpoints must be sorted ascending".into()));
    }
    if let Some(&last) = checkpoints.last() {
        if last > cfg.max_iterations {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {last} exceeds the iteration cap {}",
                cfg.max_iterations
            )));
        }
    }
    let tol = cfg.convergence_tol;
    let mut it = StateIteration::new(g, w, cfg, None)?;
    let mut converged = false;
    let mut snapshots = Vec::with_capacity(checkpoints.len());
    for &k in checkpoints {
        while it.iteration < k && !converged {
            it.step()?;
            converged = tol > 0.0 && it.last_delta < tol;
        }
        let stationary = it.iteration > 0 && it.last_delta == 0.0;
        snapshots.push(it.snapshot(converged || stationary));
    }
    Ok(snapshots)
}

/// `states` restricted to the given nodes, `H × |nodes|`.
pub fn select_nodes(states: &Array2<f64>, nodes: &[usize]) -> Array2<f64> {
    states.select(Axis(1), nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn line_graph() -> SparseGraph {
        let features = array![[1.0, 0.5], [-0.5, 0.25], [0.3, -1.0], [0.0, 0.7]];
        SparseGraph::new(4, &[(0, 1), (1, 2), (2, 3)], false, features, vec![0, 1, 0, 1], 2, None).unwrap()
    }

    #[test]
    fn single_unit_reservoir_has_exact_radius() {
        let w = init_reservoir(&ReservoirConfig::new(1, 1.0, 0.37, 11), 3).unwrap();
        assert_eq!(w.w_hat[[0, 0]].abs(), 0.37);
        assert_eq!(w.achieved_radius, 0.37);
    }

    #[test]
    fn radius_scales_linearly() {
        let a = init_reservoir(&ReservoirConfig::new(12, 1.0, 0.5, 3), 2).unwrap();
        let b = init_reservoir(&ReservoirConfig::new(12, 1.0, 1.5, 3), 2).unwrap();
        Zip::from(&a.w_hat).and(&b.w_hat).for_each(|x, y| assert!((3.0 * x - y).abs() < 1e-14));
        assert_eq!(a.w_in, b.w_in);
    }

    #[test]
    fn input_weights_respect_scaling() {
        let w = init_reservoir(&ReservoirConfig::new(256, 0.25, 1.0, 5), 4).unwrap();
        assert!(w.w_in.iter().all(|v| v.abs() <= 0.25));
        // Mean of 1024 Uniform[-s, s] draws: σ = s / sqrt(3 · 1024).
        let sigma = 0.25 / (3.0 * 1024.0f64).sqrt();
        assert!(w.w_in.mean().unwrap().abs() < 3.0 * sigma);
        let dense = linalg::dense_spectral_radius(w.w_hat.view()).unwrap();
        assert!((dense - 1.0).abs() < 1e-9);
    }

    #[test]
    fn init_rejects_bad_configs() {
        assert!(init_reservoir(&ReservoirConfig::new(0, 1.0, 1.0, 0), 2).is_err());
        assert!(init_reservoir(&ReservoirConfig::new(2, 0.0, 1.0, 0), 2).is_err());
        assert!(init_reservoir(&ReservoirConfig::new(2, 1.0, -1.0, 0), 2).is_err());
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = ReservoirConfig::new(20, 0.5, 0.9, 77);
        assert_eq!(init_reservoir(&cfg, 3).unwrap(), init_reservoir(&cfg, 3).unwrap());
        let g = line_graph();
        let w = init_reservoir(&ReservoirConfig::new(20, 0.5, 0.9, 77), 2).unwrap();
        assert_eq!(compute_embeddings(&g, &w, &cfg).unwrap(), compute_embeddings(&g, &w, &cfg).unwrap());
    }

    #[test]
    fn edgeless_graph_is_stationary_after_one_step() {
        let features = array![[1.0, -2.0], [0.5, 0.5], [0.0, 3.0]];
        let g = SparseGraph::new(3, &[], false, features.clone(), vec![0, 1, 0], 2, None).unwrap();
        let mut cfg = ReservoirConfig::new(5, 0.7, 3.0, 2);
        let w = init_reservoir(&cfg, 2).unwrap();
        let expected = w.w_in.dot(&features.t()).mapv(f64::tanh);
        cfg.max_iterations = 1;
        assert_eq!(compute_embeddings(&g, &w, &cfg).unwrap().states, expected);
        cfg.max_iterations = 40;
        let e = compute_embeddings(&g, &w, &cfg).unwrap();
        assert_eq!(e.states, expected);
        assert_eq!(e.final_delta, 0.0);
        assert!(e.converged);
    }

    #[test]
    fn zero_features_stay_zero() {
        let g = line_graph().with_features(Array2::zeros((4, 2))).unwrap();
        let cfg = ReservoirConfig::new(6, 1.0, 20.0, 9);
        let w = init_reservoir(&cfg, 2).unwrap();
        for e in state_trajectory(&g, &w, &cfg, &[1, 5, 100]).unwrap() {
            assert!(e.states.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_step_matches_dense_oracle() {
        let g = line_graph();
        let mut cfg = ReservoirConfig::new(3, 0.8, 1.7, 21);
        let w = init_reservoir(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = Array2::from_shape_fn((3, 4), |_| rng.random_range(-0.9..0.9));
        cfg.max_iterations = 1;
        let got = compute_embeddings_from(&g, &w, &cfg, start.view()).unwrap().states;

        let adj = g.adjacency().to_dense();
        let x = g.features();
        for v in 0..4 {
            let mut pre: Array1<f64> = w.w_in.dot(&x.row(v));
            for u in 0..4 {
                if adj[[u, v]] != 0.0 {
                    pre += &w.w_hat.dot(&start.column(u));
                }
            }
            for i in 0..3 {
                assert!((got[[i, v]] - pre[i].tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_modes_on_directed_graph() {
        let features = array![[1.0], [-0.5], [0.0]];
        let g = SparseGraph::new(3, &[(0, 1)], true, features, vec![0, 0, 0], 1, None).unwrap();
        let mut cfg = ReservoirConfig::new(2, 1.0, 0.9, 4);
        cfg.max_iterations = 2;
        let w = init_reservoir(&cfg, 1).unwrap();
        let alone = w.w_in.column(0).mapv(|v| (v * -0.5).tanh());
        let inward = compute_embeddings(&g, &w, &cfg).unwrap();
        // Along the arc 0 -> 1, node 1 hears node 0 and node 0 hears nobody.
        assert_ne!(inward.states.column(1), alone);
        cfg.aggregation = Aggregation::Out;
        let outward = compute_embeddings(&g, &w, &cfg).unwrap();
        assert_eq!(outward.states.column(1), alone);
        assert_ne!(outward.states.column(0), inward.states.column(0));
        assert!(outward.states.column(2).iter().all(|&v| v == 0.0));
        cfg.aggregation = Aggregation::Both;
        let both = compute_embeddings(&g, &w, &cfg).unwrap();
        assert_eq!(both.states.column(1), inward.states.column(1));
        assert_eq!(both.states.column(0), outward.states.column(0));
    }

    #[test]
    fn trajectory_examples() {
        let g = line_graph();
        let cfg = ReservoirConfig::new(4, 0.5, 2.0, 8);
        let w = init_reservoir(&cfg, 2).unwrap();
        let snaps = state_trajectory(&g, &w, &cfg, &[0, 1, 1, 100]).unwrap();
        assert!(snaps[0].states.iter().all(|&v| v == 0.0));
        assert_eq!(snaps[1].states, snaps[2].states);
        assert_eq!(snaps[3], compute_embeddings(&g, &w, &cfg).unwrap());
        assert!(state_trajectory(&g, &w, &cfg, &[101]).is_err());
        assert!(state_trajectory(&g, &w, &cfg, &[5, 2]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = line_graph();
        let cfg = ReservoirConfig::new(4, 0.5, 2.0, 8);
        let w = init_reservoir(&cfg, 3).unwrap();
        assert!(matches!(compute_embeddings(&g, &w, &cfg), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn states_lie_in_tanh_range() {
        let g = line_graph();
        let cfg = ReservoirConfig::new(8, 1.0, 5.0, 12);
        let w = init_reservoir(&cfg, 2).unwrap();
        let e = compute_embeddings(&g, &w, &cfg).unwrap();
        assert_eq!(e.iterations_run, 100);
        assert!(e.states.iter().all(|v| v.abs() < 1.0));
    }
}
