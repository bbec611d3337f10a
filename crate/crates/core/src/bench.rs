//! Experiment harness: single runs, grid search with validation-based model
//! selection, heatmap tables, embedding dumps and dataset statistics checks.
//!
//! Grid points run one after another; every heavy kernel inside a point is
//! already parallel, and running points concurrently would multiply peak
//! memory (a 4096-unit reservoir alone holds two 128 MiB matrices).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, ReferenceStats, SplitSet, DEFAULT_SPLIT_FRACTIONS};
use crate::error::{Error, Result, StageContext};
use crate::graph::{self, GraphStats, SparseGraph, DEFAULT_RADIUS_MAX_ITERS, DEFAULT_RADIUS_TOL};
use crate::readout::{self, BootstrapResult};
use crate::reservoir::{self, Aggregation, ReservoirConfig, ReservoirDraw, DEFAULT_ITERATIONS};

pub const DEFAULT_RADIUS_MULTIPLES: [f64; 12] = [0.1, 0.5, 1.0, 2.0, 4.0, 6.0, 9.0, 12.0, 18.0, 24.0, 30.0, 35.0];
pub const DEFAULT_INPUT_SCALINGS: [f64; 6] = [1.0 / 320.0, 1.0 / 80.0, 1.0 / 20.0, 1.0 / 5.0, 1.0 / 2.0, 1.0];
pub const DEFAULT_UNITS: [usize; 5] = [16, 64, 256, 1024, 4096];
pub const DEFAULT_LAMBDAS: [f64; 4] = [1e-6, 1e-3, 1.0, 10.0];

pub const HEATMAP_CSV_HEADER: &str = "radius_multiple,input_scaling,mean_test_accuracy,ci_low,ci_high";
pub const SUMMARY_CSV_HEADER: &str =
    "units,radius_multiple,input_scaling,lambda,num_seeds,mean_val_accuracy,mean_test_accuracy,std_test_accuracy,status";

/// Hyperparameter lists; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    /// Reservoir radius as a multiple of `1 / α`, `α` the graph's spectral radius.
    pub radius_multiples: Vec<f64>,
    pub input_scalings: Vec<f64>,
    pub units: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            radius_multiples: DEFAULT_RADIUS_MULTIPLES.to_vec(),
            input_scalings: DEFAULT_INPUT_SCALINGS.to_vec(),
            units: DEFAULT_UNITS.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

impl Grid {
    pub fn single(point: GridPoint) -> Self {
        Self {
            radius_multiples: vec![point.radius_multiple],
            input_scalings: vec![point.input_scaling],
            units: vec![point.units],
            lambdas: vec![point.lambda],
        }
    }

    pub fn len(&self) -> usize {
        self.radius_multiples.len() * self.input_scalings.len() * self.units.len() * self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &units in &self.units {
            for &radius_multiple in &self.radius_multiples {
                for &input_scaling in &self.input_scalings {
                    for &lambda in &self.lambdas {
                        out.push(GridPoint {
                            radius_multiple,
                            input_scaling,
                            units,
                            lambda,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("radius_multiples", self.radius_multiples.is_empty()),
            ("input_scalings", self.input_scalings.is_empty()),
            ("units", self.units.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidArgument(format!("grid list `{name}` is empty")));
            }
        }
        if let Some(r) = self.radius_multiples.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::InvalidArgument(format!("radius multiples must be positive, got {r}")));
        }
        if let Some(s) = self.input_scalings.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("input scalings must be positive, got {s}")));
        }
        if self.units.contains(&0) {
            return Err(Error::InvalidArgument("reservoir units must be at least 1".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidArgument(format!("ridge lambdas must be non-negative, got {l}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub radius_multiple: f64,
    pub input_scaling: f64,
    pub units: usize,
    pub lambda: f64,
}

impl GridPoint {
    /// Ordering used to break validation ties: smaller H, radius, scaling, λ first.
    fn tie_key(&self) -> (usize, f64, f64, f64) {
        (self.units, self.radius_multiple, self.input_scaling, self.lambda)
    }

    fn preference(&self, other: &Self) -> std::cmp::Ordering {
        let (a, b) = (self.tie_key(), other.tie_key());
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
    }

    fn key_bits(&self) -> (usize, u64, u64, u64) {
        (
            self.units,
            self.radius_multiple.to_bits(),
            self.input_scaling.to_bits(),
            self.lambda.to_bits(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSource {
    /// Seeded split; `seed: None` reuses each run's seed so seeds vary the split too.
    Generated {
        fractions: (f64, f64, f64),
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_true")]
        stratified: bool,
    },
    File {
        path: PathBuf,
    },
}

impl Default for SplitSource {
    fn default() -> Self {
        SplitSource::Generated {
            fractions: DEFAULT_SPLIT_FRACTIONS,
            seed: None,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub resamples: usize,
    pub confidence: f64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            resamples: 1000,
            confidence: 0.95,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// Everything needed to reproduce a run or a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: String,
    #[serde(default)]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub undirected: bool,
    #[serde(default)]
    pub lcc: bool,
    #[serde(default)]
    pub grid: Grid,
    /// Number of reservoir iterations `K`.
    #[serde(default = "default_iterations", alias = "K")]
    pub iterations: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub split: SplitSource,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl ExperimentSpec {
    pub fn new(dataset: impl Into<String>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            data_dir: data_dir.into(),
            undirected: false,
            lcc: false,
            grid: Grid::default(),
            iterations: DEFAULT_ITERATIONS,
            seeds: default_seeds(),
            split: SplitSource::default(),
            bootstrap: BootstrapSpec::default(),
            aggregation: Aggregation::In,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.bootstrap.resamples == 0 {
            return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
        }
        if !(self.bootstrap.confidence > 0.0 && self.bootstrap.confidence < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bootstrap confidence must lie in (0, 1), got {}",
                self.bootstrap.confidence
            )));
        }
        Ok(())
    }
}

/// Wall-clock seconds per phase.
///
/// `total` spans the model run (split, embed, fit, eval); `load` and
/// `preprocess` are the one-off costs of preparing the graph. In grid results
/// work shared between rows is charged to the first row that performed it, so
/// summing a phase over rows gives the time actually spent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub load: f64,
    pub preprocess: f64,
    /// Reservoir draw, rescaling and state iteration.
    pub embed: f64,
    pub fit: f64,
    pub eval: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub point: GridPoint,
    pub seed: u64,
    /// Spectral radius of the evaluated graph.
    pub alpha: f64,
    pub target_radius: f64,
    pub iterations: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test: BootstrapResult,
    pub timings: PhaseTimings,
}

/// A graph after loading and preprocessing, with its spectral radius.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub name: String,
    pub graph: SparseGraph,
    pub alpha: f64,
    pub source_checksum: Option<String>,
    pub load_seconds: f64,
    pub preprocess_seconds: f64,
}

impl PreparedGraph {
    /// Radius `multiple / α`. Graphs without arcs have `α = 0`; the recurrent
    /// term is then empty and the multiple itself is used as the radius.
    pub fn target_radius(&self, multiple: f64) -> f64 {
        if self.alpha > 0.0 {
            multiple / self.alpha
        } else {
            multiple
        }
    }
}

/// Optional symmetrization and largest-component restriction, then `α`.
pub fn prepare_graph(name: &str, graph: SparseGraph, undirected: bool, lcc: bool) -> Result<PreparedGraph> {
    let start = Instant::now();
    let mut g = graph;
    if undirected {
        g = graph::to_undirected(&g);
    }
    if lcc {
        g = graph::largest_connected_component(&g).stage("lcc")?;
    }
    let alpha = graph::spectral_radius(&g, DEFAULT_RADIUS_TOL, DEFAULT_RADIUS_MAX_ITERS).stage("spectral_radius")?;
    Ok(PreparedGraph {
        name: name.to_string(),
        graph: g,
        alpha,
        source_checksum: None,
        load_seconds: 0.0,
        preprocess_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads `spec.dataset` from `spec.data_dir` and prepares it.
pub fn prepare(spec: &ExperimentSpec) -> Result<PreparedGraph> {
    let start = Instant::now();
    let data = dataset::load_dataset(&spec.data_dir, &spec.dataset).stage("load")?;
    let load_seconds = start.elapsed().as_secs_f64();
    let mut prepared = prepare_graph(&data.name, data.graph, spec.undirected, spec.lcc)?;
    prepared.source_checksum = Some(data.source_checksum);
    prepared.load_seconds = load_seconds;
    Ok(prepared)
}

/// The split used for `seed`. File splits are read relative to the
/// evaluated graph, so they must index its nodes after preprocessing.
pub fn split_for(spec: &ExperimentSpec, g: &SparseGraph, seed: u64) -> Result<SplitSet> {
    let split = match &spec.split {
        SplitSource::Generated {
            fractions,
            seed: fixed,
            stratified,
        } => dataset::make_splits(g, *fractions, fixed.unwrap_or(seed), *stratified)?,
        SplitSource::File { path } => dataset::load_splits(path, g.num_nodes())?,
    };
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "train/val/test sizes {}/{}/{}: all three must be non-empty",
            split.train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    Ok(split)
}

fn reservoir_config(spec: &ExperimentSpec, prepared: &PreparedGraph, point: &GridPoint, seed: u64) -> ReservoirConfig {
    ReservoirConfig {
        units: point.units,
        input_scaling: point.input_scaling,
        target_radius: prepared.target_radius(point.radius_multiple),
        seed,
        max_iterations: spec.iterations,
        convergence_tol: 0.0,
        aggregation: spec.aggregation,
    }
}

struct Evaluation {
    val_accuracy: f64,
    test_accuracy: f64,
    test: BootstrapResult,
    fit: f64,
    eval: f64,
}

fn fit_and_evaluate(
    states: &Array2<f64>,
    g: &SparseGraph,
    split: &SplitSet,
    lambda: f64,
    bootstrap: &BootstrapSpec,
    seed: u64,
) -> Result<Evaluation> {
    let labels = g.labels();
    let pick = |nodes: &[usize]| nodes.iter().map(|&v| labels[v]).collect::<Vec<_>>();

    let start = Instant::now();
    let train = reservoir::select_nodes(states, &split.train);
    let model = readout::fit_ridge(train.view(), &pick(&split.train), g.num_classes(), lambda).stage("fit")?;
    let fit = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let (val_accuracy, test_accuracy, test) = (|| -> Result<_> {
        let val_pred = readout::predict(&model, reservoir::select_nodes(states, &split.val).view())?;
        let val_accuracy = readout::accuracy(&val_pred, &pick(&split.val))?;
        let test_truth = pick(&split.test);
        let test_pred = readout::predict(&model, reservoir::select_nodes(states, &split.test).view())?;
        let test_accuracy = readout::accuracy(&test_pred, &test_truth)?;
        let test = readout::bootstrap_ci(&test_pred, &test_truth, bootstrap.resamples, bootstrap.confidence, seed)?;
        Ok((val_accuracy, test_accuracy, test))
    })()
    .stage("eval")?;
    Ok(Evaluation {
        val_accuracy,
        test_accuracy,
        test,
        fit,
        eval: start.elapsed().as_secs_f64(),
    })
}

/// One grid point and seed on an already prepared graph.
pub fn run_point(prepared: &PreparedGraph, spec: &ExperimentSpec, point: &GridPoint, seed: u64) -> Result<RunResult> {
    let total = Instant::now();
    let g = &prepared.graph;
    let split = split_for(spec, g, seed).stage("split")?;

    let start = Instant::now();
    let cfg = reservoir_config(spec, prepared, point, seed);
    let weights = reservoir::init_reservoir(&cfg, g.num_features()).stage("init_reservoir")?;
    let embedding = reservoir::compute_embeddings(g, &weights, &cfg).stage("embed")?;
    drop(weights);
    let embed = start.elapsed().as_secs_f64();

    let ev = fit_and_evaluate(&embedding.states, g, &split, point.lambda, &spec.bootstrap, seed)?;
    Ok(RunResult {
        dataset: prepared.name.clone(),
        point: *point,
        seed,
        alpha: prepared.alpha,
        target_radius: cfg.target_radius,
        iterations: spec.iterations,
        val_accuracy: ev.val_accuracy,
        test_accuracy: ev.test_accuracy,
        test: ev.test,
        timings: PhaseTimings {
            load: prepared.load_seconds,
            preprocess: prepared.preprocess_seconds,
            embed,
            fit: ev.fit,
            eval: ev.eval,
            total: total.elapsed().as_secs_f64(),
        },
    })
}

/// Runs a spec whose grid holds exactly one point, for its first seed.
pub fn run_single(spec: &ExperimentSpec) -> Result<RunResult> {
    spec.validate()?;
    let points = spec.grid.points();
    if points.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "a single run needs exactly one grid point, the spec has {}",
            points.len()
        )));
    }
    let prepared = prepare(spec)?;
    run_point(&prepared, spec, &points[0], spec.seeds[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub point: GridPoint,
    pub seed: u64,
    pub error: String,
}

/// Seed-averaged scores of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub point: GridPoint,
    pub num_seeds: usize,
    pub mean_val_accuracy: f64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    /// False when any seed failed; such points are never selected.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: PointSummary,
    /// Winner's run for every seed.
    pub best_runs: Vec<RunResult>,
    pub summaries: Vec<PointSummary>,
    pub results: Vec<RunResult>,
    pub failures: Vec<GridFailure>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Picks the complete point with the highest mean validation accuracy, ties
/// going to the smaller (H, radius multiple, input scaling, λ).
pub fn select_best(summaries: &[PointSummary]) -> Option<&PointSummary> {
    summaries.iter().filter(|s| s.complete).max_by(|a, b| {
        a.mean_val_accuracy
            .total_cmp(&b.mean_val_accuracy)
            .then_with(|| b.point.preference(&a.point))
    })
}

fn summarize(points: &[GridPoint], seeds: &[u64], results: &[RunResult]) -> Vec<PointSummary> {
    let mut by_point: HashMap<(usize, u64, u64, u64), Vec<&RunResult>> = HashMap::new();
    for r in results {
        by_point.entry(r.point.key_bits()).or_default().push(r);
    }
    points
        .iter()
        .map(|p| {
            let mut runs = by_point.remove(&p.key_bits()).unwrap_or_default();
            runs.sort_by_key(|r| seeds.iter().position(|&s| s == r.seed));
            let val: Vec<f64> = runs.iter().map(|r| r.val_accuracy).collect();
            let test: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
            let (mean_test, std_test) = mean_std(&test);
            PointSummary {
                point: *p,
                num_seeds: runs.len(),
                mean_val_accuracy: mean_std(&val).0,
                mean_test_accuracy: mean_test,
                std_test_accuracy: std_test,
                complete: runs.len() == seeds.len(),
            }
        })
        .collect()
}

/// Evaluates every grid point for every seed and selects on mean validation accuracy.
///
/// One reservoir draw per (seed, H) is rescaled for every radius and input
/// scaling, and one embedding per (seed, H, radius, scaling) serves every λ.
/// `on_result` sees each run as soon as it finishes.
pub fn grid_search_prepared(
    prepared: &PreparedGraph,
    spec: &ExperimentSpec,
    mut on_result: impl FnMut(&RunResult) -> Result<()>,
) -> Result<GridOutcome> {
    spec.validate()?;
    let g = &prepared.graph;
    let points = spec.grid.points();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let fail = |failures: &mut Vec<GridFailure>, point: GridPoint, seed: u64, err: &Error| {
        log::warn!(
            "grid point H={} radius={} scaling={} lambda={} seed={seed} failed: {err}",
            point.units,
            point.radius_multiple,
            point.input_scaling,
            point.lambda
        );
        failures.push(GridFailure {
            point,
            seed,
            error: err.to_string(),
        });
    };

    let mut first_row = true;
    for &seed in &spec.seeds {
        let split = match split_for(spec, g, seed).stage("split") {
            Ok(s) => s,
            Err(e) => {
                for p in &points {
                    fail(&mut failures, *p, seed, &e);
                }
                continue;
            }
        };
        for &units in &spec.grid.units {
            let start = Instant::now();
            let draw = ReservoirDraw::new(seed, units, g.num_features()).stage("init_reservoir");
            let mut pending_embed = start.elapsed().as_secs_f64();
            let draw = match draw {
                Ok(d) => d,
                Err(e) => {
                    for p in points.iter().filter(|p| p.units == units) {
                        fail(&mut failures, *p, seed, &e);
                    }
                    continue;
                }
            };
            for &radius_multiple in &spec.grid.radius_multiples {
                for &input_scaling in &spec.grid.input_scalings {
                    let base = GridPoint {
                        radius_multiple,
                        input_scaling,
                        units,
                        lambda: 0.0,
                    };
                    let start = Instant::now();
                    let cfg = reservoir_config(spec, prepared, &base, seed);
                    let embedded = cfg.validate().and_then(|_| {
                        let weights = draw.scaled(input_scaling, cfg.target_radius);
                        reservoir::compute_embeddings(g, &weights, &cfg)
                    });
                    pending_embed += start.elapsed().as_secs_f64();
                    let embedding = match embedded.stage("embed") {
                        Ok(e) => e,
                        Err(e) => {
                            for &lambda in &spec.grid.lambdas {
                                fail(&mut failures, GridPoint { lambda, ..base }, seed, &e);
                            }
                            continue;
                        }
                    };
                    for &lambda in &spec.grid.lambdas {
                        let point = GridPoint { lambda, ..base };
                        match fit_and_evaluate(&embedding.states, g, &split, lambda, &spec.bootstrap, seed) {
                            Ok(ev) => {
                                let embed = std::mem::take(&mut pending_embed);
                                let (load, preprocess) = if std::mem::take(&mut first_row) {
                                    (prepared.load_seconds, prepared.preprocess_seconds)
                                } else {
                                    (0.0, 0.0)
                                };
                                let result = RunResult {
                                    dataset: prepared.name.clone(),
                                    point,
                                    seed,
                                    alpha: prepared.alpha,
                                    target_radius: cfg.target_radius,
                                    iterations: spec.iterations,
                                    val_accuracy: ev.val_accuracy,
                                    test_accuracy: ev.test_accuracy,
                                    test: ev.test,
                                    timings: PhaseTimings {
                                        load,
                                        preprocess,
                                        embed,
                                        fit: ev.fit,
                                        eval: ev.eval,
                                        total: embed + ev.fit + ev.eval,
                                    },
                                };
                                on_result(&result).stage("write_results")?;
                                results.push(result);
                            }
                            Err(e) => fail(&mut failures, point, seed, &e),
                        }
                    }
                }
            }
        }
    }

    let summaries = summarize(&points, &spec.seeds, &results);
    let best = select_best(&summaries)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("every grid point failed; nothing to select".into()))?;
    let mut best_runs: Vec<RunResult> = results
        .iter()
        .filter(|r| r.point.key_bits() == best.point.key_bits())
        .cloned()
        .collect();
    best_runs.sort_by_key(|r| spec.seeds.iter().position(|&s| s == r.seed));
    Ok(GridOutcome {
        best,
        best_runs,
        summaries,
        results,
        failures,
    })
}

/// Loads and prepares the dataset, then runs [`grid_search_prepared`].
pub fn grid_search(spec: &ExperimentSpec, on_result: impl FnMut(&RunResult) -> Result<()>) -> Result<GridOutcome> {
    spec.validate()?;
    let prepared = prepare(spec)?;
    grid_search_prepared(&prepared, spec, on_result)
}

pub fn write_summary_csv<W: Write>(mut out: W, summaries: &[PointSummary]) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_CSV_HEADER}")?;
    for s in summaries {
        let p = &s.point;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.units,
            p.radius_multiple,
            p.input_scaling,
            p.lambda,
            s.num_seeds,
            s.mean_val_accuracy,
            s.mean_test_accuracy,
            s.std_test_accuracy,
            if s.complete { "ok" } else { "failed" }
        )?;
    }
    Ok(())
}

/// Appends one JSON line per result, creating the file if needed.
pub fn append_jsonl(path: &Path, results: &[RunResult]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunResult>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

/// Fixed values for the axes a heatmap does not show.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeatmapSlice {
    pub units: Option<usize>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapCell {
    pub radius_multiple: f64,
    pub input_scaling: f64,
    pub mean_test_accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Radius × scaling table of test accuracy for one (H, λ).
///
/// Each cell averages, over seeds, the test accuracy and the bootstrap bounds.
/// An unset slice coordinate is allowed only when the results hold a single
/// value for it. Cells come sorted by (radius multiple, input scaling).
pub fn heatmap(results: &[RunResult], slice: HeatmapSlice) -> Result<Vec<HeatmapCell>> {
    let units_present: BTreeSet<usize> = results.iter().map(|r| r.point.units).collect();
    let units = match slice.units {
        Some(u) => u,
        None if units_present.len() == 1 => *units_present.iter().next().unwrap_or(&0),
        None => {
            return Err(Error::InvalidArgument(format!(
                "results span several unit counts {units_present:?}; choose one"
            )))
        }
    };
    let lambdas_present: BTreeSet<u64> = results
        .iter()
        .filter(|r| r.point.units == units)
        .map(|r| r.point.lambda.to_bits())
        .collect();
    let lambda_bits = match slice.lambda {
        Some(l) => l.to_bits(),
        None if lambdas_present.len() == 1 => *lambdas_present.iter().next().unwrap_or(&0),
        None => {
            let listed: Vec<f64> = lambdas_present.iter().map(|b| f64::from_bits(*b)).collect();
            return Err(Error::InvalidArgument(format!(
                "results span several ridge lambdas {listed:?}; choose one"
            )));
        }
    };

    let rows: Vec<&RunResult> = results
        .iter()
        .filter(|r| r.point.units == units && r.point.lambda.to_bits() == lambda_bits)
        .collect();
    if rows.is_empty() {
        return Err(Error::IncompleteGrid(format!(
            "no results for H={units}, lambda={}",
            f64::from_bits(lambda_bits)
        )));
    }

    let mut cells: BTreeMap<(OrdF64, OrdF64), Vec<&RunResult>> = BTreeMap::new();
    let mut radii = BTreeSet::new();
    let mut scalings = BTreeSet::new();
    for r in rows {
        radii.insert(OrdF64(r.point.radius_multiple));
        scalings.insert(OrdF64(r.point.input_scaling));
        cells
            .entry((OrdF64(r.point.radius_multiple), OrdF64(r.point.input_scaling)))
            .or_default()
            .push(r);
    }
    let missing: Vec<String> = radii
        .iter()
        .flat_map(|r| scalings.iter().map(move |s| (*r, *s)))
        .filter(|k| !cells.contains_key(k))
        .map(|(r, s)| format!("(radius_multiple={}, input_scaling={})", r.0, s.0))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteGrid(format!("missing cells: {}", missing.join(", "))));
    }

    Ok(cells
        .into_iter()
        .map(|((r, s), runs)| {
            let n = runs.len() as f64;
            let avg = |f: fn(&RunResult) -> f64| runs.iter().map(|x| f(x)).sum::<f64>() / n;
            HeatmapCell {
                radius_multiple: r.0,
                input_scaling: s.0,
                mean_test_accuracy: avg(|x| x.test_accuracy),
                ci_low: avg(|x| x.test.ci_low),
                ci_high: avg(|x| x.test.ci_high),
            }
        })
        .collect())
}

pub fn write_heatmap_csv<W: Write>(mut out: W, cells: &[HeatmapCell]) -> std::io::Result<()> {
    writeln!(out, "{HEATMAP_CSV_HEADER}")?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.radius_multiple, c.input_scaling, c.mean_test_accuracy, c.ci_low, c.ci_high
        )?;
    }
    Ok(())
}

/// Builds the heatmap from `results` and writes it to `path` as CSV.
pub fn export_heatmap(results: &[RunResult], slice: HeatmapSlice, path: &Path) -> Result<Vec<HeatmapCell>> {
    let cells = heatmap(results, slice)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_heatmap_csv(&mut out, &cells).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(cells)
}

#[derive(Debug, Clone, Copy)]
struct OrdF64(f64);

impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpFormat {
    /// Little-endian `f64` values after the header.
    #[default]
    Binary,
    /// One matrix row per line, space separated.
    Text,
}

/// Writes an `H × N` state matrix: a header line `H N k` (with `k` right
/// aligned to 20 characters, so binary dumps of equal shape have equal
/// size) followed by the entries in row-major order.
pub fn write_embedding_dump<W: Write>(mut out: W, states: &Array2<f64>, iteration: usize, format: DumpFormat) -> std::io::Result<()> {
    let (h, n) = states.dim();
    writeln!(out, "{h} {n} {iteration:>20}")?;
    match format {
        DumpFormat::Binary => {
            for v in states.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        DumpFormat::Text => {
            for row in states.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_embedding_dump`]; returns `(iteration, states)`.
pub fn read_embedding_dump(path: &Path, format: DumpFormat) -> Result<(usize, Array2<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::parse(path, 1, "header is not UTF-8"))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(path, 1, format!("bad header field {t:?}"))))
        .collect::<Result<_>>()?;
    let [h, n, k] = fields[..] else {
        return Err(Error::parse(path, 1, "header must be `H N iteration`"));
    };
    let body = &bytes[newline + 1..];
    let values: Vec<f64> = match format {
        DumpFormat::Binary => {
            if body.len() != h * n * 8 {
                return Err(Error::parse(path, 2, format!("expected {} bytes of data, found {}", h * n * 8, body.len())));
            }
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap_or([0; 8])))
                .collect()
        }
        DumpFormat::Text => {
            let text = std::str::from_utf8(body).map_err(|_| Error::parse(path, 2, "body is not UTF-8"))?;
            let mut vals = Vec::with_capacity(h * n);
            for (i, line) in text.lines().enumerate() {
                for tok in line.split_whitespace() {
                    vals.push(tok.parse().map_err(|_| Error::parse(path, i + 2, format!("bad value {tok:?}")))?);
                }
            }
            vals
        }
    };
    let states = Array2::from_shape_vec((h, n), values)
        .map_err(|_| Error::parse(path, 2, format!("data does not form a {h} x {n} matrix")))?;
    Ok((k, states))
}

/// Node states of one configuration at the given iteration counts, one file
/// per checkpoint named `<dataset>_H<units>_seed<seed>_k<k>.<bin|txt>`.
pub fn export_embeddings(
    prepared: &PreparedGraph,
    spec: &ExperimentSpec,
    point: &GridPoint,
    seed: u64,
    checkpoints: &[usize],
    out_dir: &Path,
    format: DumpFormat,
) -> Result<Vec<PathBuf>> {
    let mut ks = checkpoints.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut cfg = reservoir_config(spec, prepared, point, seed);
    if let Some(&last) = ks.last() {
        cfg.max_iterations = cfg.max_iterations.max(last);
    }
    let weights = reservoir::init_reservoir(&cfg, prepared.graph.num_features()).stage("init_reservoir")?;
    let snapshots = reservoir::state_trajectory(&prepared.graph, &weights, &cfg, &ks).stage("embed")?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ext = match format {
        DumpFormat::Binary => "bin",
        DumpFormat::Text => "txt",
    };
    let mut paths = Vec::with_capacity(ks.len());
    for (k, snap) in ks.iter().zip(&snapshots) {
        let path = out_dir.join(format!("{}_H{}_seed{seed}_k{k}.{ext}", prepared.name, point.units));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        write_embedding_dump(&mut out, &snap.states, *k, format)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Which edge count of the graph equals the reference count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeConvention {
    UnorderedPairs,
    StoredArcs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsComparison {
    pub computed: GraphStats,
    pub reference: Option<ReferenceStats>,
    pub nodes_match: bool,
    pub edge_convention: Option<EdgeConvention>,
    pub homophily_error: Option<f64>,
    pub radius_error: Option<f64>,
    pub features_match: bool,
    pub classes_match: bool,
}

pub const HOMOPHILY_TOLERANCE: f64 = 0.005;
pub const RADIUS_TOLERANCE: f64 = 0.01;

impl StatsComparison {
    pub fn passes(&self) -> bool {
        self.reference.is_some()
            && self.nodes_match
            && self.edge_convention.is_some()
            && self.features_match
            && self.classes_match
            && self.homophily_error.is_some_and(|e| e <= HOMOPHILY_TOLERANCE)
            && self.radius_error.is_some_and(|e| e <= RADIUS_TOLERANCE)
    }
}

/// Compares computed statistics with the published ones for `name`.
pub fn compare_stats(name: &str, computed: GraphStats) -> StatsComparison {
    let reference = dataset::reference_stats(name).copied();
    let Some(r) = reference else {
        return StatsComparison {
            computed,
            reference: None,
            nodes_match: false,
            edge_convention: None,
            homophily_error: None,
            radius_error: None,
            features_match: false,
            classes_match: false,
        };
    };
    let edge_convention = if computed.num_edges == r.edges {
        Some(EdgeConvention::UnorderedPairs)
    } else if computed.num_arcs == r.edges {
        Some(EdgeConvention::StoredArcs)
    } else {
        None
    };
    StatsComparison {
        nodes_match: computed.num_nodes == r.nodes,
        edge_convention,
        homophily_error: Some((computed.edge_homophily - r.homophily).abs()),
        radius_error: Some((computed.spectral_radius - r.spectral_radius).abs()),
        features_match: computed.num_features == r.features,
        classes_match: computed.num_classes == r.classes,
        computed,
        reference,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn point(units: usize, radius_multiple: f64, input_scaling: f64, lambda: f64) -> GridPoint {
        GridPoint {
            radius_multiple,
            input_scaling,
            units,
            lambda,
        }
    }

    fn summary(p: GridPoint, val: f64) -> PointSummary {
        PointSummary {
            point: p,
            num_seeds: 1,
            mean_val_accuracy: val,
            mean_test_accuracy: 0.5,
            std_test_accuracy: 0.0,
            complete: true,
        }
    }

    #[test]
    fn grid_validation() {
        let mut g = Grid::single(point(0, 1.0, 1.0, 1.0));
        assert!(g.validate().is_err());
        g.units = vec![4, 0];
        assert!(g.validate().is_err());
        g.units = vec![4];
        g.radius_multiples = vec![0.0];
        assert!(g.validate().is_err());
        g.radius_multiples = vec![];
        assert!(g.validate().is_err());
        assert_eq!(Grid::default().len(), 12 * 6 * 5 * 4);
        Grid::default().validate().unwrap();
    }

    #[test]
    fn selection_tie_breaks() {
        let s = vec![
            summary(point(64, 1.0, 1.0, 1.0), 0.8),
            summary(point(16, 2.0, 1.0, 1.0), 0.8),
            summary(point(16, 1.0, 0.5, 1.0), 0.8),
            summary(point(16, 1.0, 0.5, 0.1), 0.8),
            summary(point(16, 0.1, 0.5, 0.1), 0.7),
        ];
        assert_eq!(select_best(&s).unwrap().point, point(16, 1.0, 0.5, 0.1));
        let mut rev = s.clone();
        rev.reverse();
        assert_eq!(select_best(&rev).unwrap().point, point(16, 1.0, 0.5, 0.1));

        let mut incomplete = s;
        incomplete[3].complete = false;
        assert_eq!(select_best(&incomplete).unwrap().point, point(16, 1.0, 0.5, 1.0));
    }

    #[test]
    fn spec_json_defaults() {
        let spec: ExperimentSpec = serde_json::from_str(r#"{"dataset": "texas", "K": 50}"#).unwrap();
        assert_eq!(spec.iterations, 50);
        assert_eq!(spec.seeds.len(), 10);
        assert_eq!(spec.split, SplitSource::default());
        assert_eq!(spec.grid, Grid::default());
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&text).unwrap(), spec);
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"dataset": "x", "bogus": 1}"#).is_err());
        let file: ExperimentSpec =
            serde_json::from_str(r#"{"dataset": "x", "split": {"kind": "file", "path": "s.txt"}}"#).unwrap();
        assert_eq!(file.split, SplitSource::File { path: "s.txt".into() });
    }

    fn fake_result(p: GridPoint, seed: u64, acc: f64) -> RunResult {
        RunResult {
            dataset: "d".into(),
            point: p,
            seed,
            alpha: 1.0,
            target_radius: p.radius_multiple,
            iterations: 1,
            val_accuracy: acc,
            test_accuracy: acc,
            test: BootstrapResult {
                mean_accuracy: acc,
                ci_low: acc - 0.1,
                ci_high: acc + 0.1,
                num_resamples: 10,
                confidence: 0.95,
                seed,
            },
            timings: PhaseTimings::default(),
        }
    }

    #[test]
    fn heatmap_cells_and_gaps() {
        let one = vec![fake_result(point(4, 1.0, 0.5, 1.0), 0, 0.6)];
        let cells = heatmap(&one, HeatmapSlice::default()).unwrap();
        assert_eq!(cells.len(), 1);
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &cells).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{HEATMAP_CSV_HEADER}\n1,0.5,0.6,0.5,0.7\n"));

        let mut four = Vec::new();
        for (r, s) in [(2.0, 1.0), (1.0, 1.0), (2.0, 0.5), (1.0, 0.5)] {
            four.push(fake_result(point(4, r, s, 1.0), 0, 0.5));
            four.push(fake_result(point(4, r, s, 1.0), 1, 0.7));
        }
        let cells = heatmap(&four, HeatmapSlice::default()).unwrap();
        let axes: Vec<(f64, f64)> = cells.iter().map(|c| (c.radius_multiple, c.input_scaling)).collect();
        assert_eq!(axes, vec![(1.0, 0.5), (1.0, 1.0), (2.0, 0.5), (2.0, 1.0)]);
        assert!(cells.iter().all(|c| (c.mean_test_accuracy - 0.6).abs() < 1e-12));

        four.retain(|r| !(r.point.radius_multiple == 2.0 && r.point.input_scaling == 0.5));
        let err = heatmap(&four, HeatmapSlice::default()).unwrap_err().to_string();
        assert!(err.contains("radius_multiple=2, input_scaling=0.5"), "{err}");

        let mut mixed = one.clone();
        mixed.push(fake_result(point(4, 1.0, 0.5, 10.0), 0, 0.4));
        assert!(heatmap(&mixed, HeatmapSlice::default()).is_err());
        let cells = heatmap(&mixed, HeatmapSlice { units: None, lambda: Some(10.0) }).unwrap();
        assert_eq!(cells[0].mean_test_accuracy, 0.4);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = fake_result(point(4, 1.0, 0.5, 1.0), 0, 0.25);
        let b = fake_result(point(8, 2.0, 0.5, 1.0), 1, 0.75);
        append_jsonl(&path, std::slice::from_ref(&a)).unwrap();
        append_jsonl(&path, std::slice::from_ref(&b)).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn dump_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[0.25, -1.0, 1.0 / 3.0], [0.0, 0.5, -0.125]];
        for format in [DumpFormat::Binary, DumpFormat::Text] {
            let path = dir.path().join("m");
            let mut f = File::create(&path).unwrap();
            write_embedding_dump(&mut f, &m, 7, format).unwrap();
            drop(f);
            assert_eq!(read_embedding_dump(&path, format).unwrap(), (7, m.clone()));
        }
    }

    #[test]
    fn edgeless_graph_uses_multiple_as_radius() {
        let g = SparseGraph::from_edges(3, &[], false).unwrap();
        let p = prepare_graph("e", g, false, false).unwrap();
        assert_eq!(p.alpha, 0.0);
        assert_eq!(p.target_radius(2.0), 2.0);
    }

    #[test]
    fn stats_comparison() {
        let mut stats = GraphStats {
            num_nodes: 183,
            num_edges: 295,
            num_arcs: 590,
            spectral_radius: 2.555,
            edge_homophily: 0.108,
            num_features: 1703,
            num_classes: 5,
        };
        let c = compare_stats("texas", stats.clone());
        assert!(c.passes());
        assert_eq!(c.edge_convention, Some(EdgeConvention::UnorderedPairs));
        stats.num_edges = 300;
        stats.num_arcs = 295;
        assert_eq!(compare_stats("Texas", stats.clone()).edge_convention, Some(EdgeConvention::StoredArcs));
        stats.edge_homophily = 0.12;
        assert!(!compare_stats("texas", stats.clone()).passes());
        assert!(!compare_stats("unknown", stats).passes());
    }
}
