mod common;

use std::fs;
use std::path::{Path, PathBuf};

use gesn_core::bench::{
    self, export_embeddings, grid_search_prepared, prepare, prepare_graph, read_embedding_dump, run_point, run_single,
    DumpFormat, ExperimentSpec, Grid, GridPoint, RunResult, SplitSource,
};
use gesn_core::dataset::load_dataset;
use gesn_core::SparseGraph;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn toy_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::new("toy3", fixtures());
    spec.grid = Grid::single(GridPoint {
        radius_multiple: 2.0,
        input_scaling: 0.5,
        units: 4,
        lambda: 1e-3,
    });
    spec.seeds = vec![7];
    spec.split = SplitSource::File {
        path: fixtures().join("toy3.split"),
    };
    spec.bootstrap.resamples = 200;
    spec
}

fn without_timings(mut r: RunResult) -> RunResult {
    r.timings = Default::default();
    r
}

#[test]
fn fixture_matches_hand_written_graph() {
    let d = load_dataset(&fixtures(), "toy3").unwrap();
    let g = &d.graph;
    assert_eq!(d.name, "toy3");
    assert_eq!(g.num_nodes(), 3);
    assert!(!g.is_directed());
    assert_eq!(g.num_edges(), 2);
    assert_eq!(g.num_arcs(), 4);
    assert_eq!(g.out_neighbors(0), &[1]);
    assert_eq!(g.out_neighbors(1), &[0, 2]);
    assert_eq!(g.out_neighbors(2), &[1]);
    assert_eq!(g.features(), &array![[1.0, 0.0], [0.0, 1.0], [0.5, -0.25]]);
    assert_eq!(g.labels(), &[0, 1, 1]);
    assert_eq!(g.num_classes(), 2);
    assert_eq!(g.node_ids(), &[10, 20, 30]);
    let expected = SparseGraph::new(
        3,
        &[(0, 1), (1, 2)],
        false,
        array![[1.0, 0.0], [0.0, 1.0], [0.5, -0.25]],
        vec![0, 1, 1],
        2,
        Some(vec![10, 20, 30]),
    )
    .unwrap();
    assert_eq!(g, &expected);
}

#[test]
fn fixture_run_completes_and_is_deterministic() {
    let spec = toy_spec();
    let a = run_single(&spec).unwrap();
    assert!((0.0..=1.0).contains(&a.val_accuracy));
    assert!((0.0..=1.0).contains(&a.test_accuracy));
    assert!((a.alpha - 2f64.sqrt()).abs() < 1e-6);
    assert!((a.target_radius - 2.0 / a.alpha).abs() < 1e-12);
    let b = run_single(&spec).unwrap();
    assert_eq!(without_timings(a.clone()), without_timings(b));

    // A one-point grid reproduces the single run.
    let prepared = prepare(&spec).unwrap();
    let outcome = grid_search_prepared(&prepared, &spec, |_| Ok(())).unwrap();
    assert_eq!(outcome.results.len(), 1);
    assert_eq!(without_timings(outcome.best_runs[0].clone()), without_timings(a));
}

#[test]
fn stage_names_reach_the_error() {
    let mut spec = toy_spec();
    spec.dataset = "absent".into();
    let msg = run_single(&spec).unwrap_err().to_string();
    assert!(msg.contains("stage `load`"), "{msg}");

    let mut spec = toy_spec();
    spec.split = SplitSource::Generated {
        fractions: (0.6, 0.2, 0.2),
        seed: None,
        stratified: true,
    };
    let msg = run_single(&spec).unwrap_err().to_string();
    assert!(msg.contains("stage `split`"), "{msg}");

    let mut spec = toy_spec();
    spec.grid.units = vec![4, 0];
    assert!(run_single(&spec).is_err());
}

/// Labels are the sign of feature 0; no edges.
fn sign_task(n: usize, seed: u64) -> SparseGraph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, 3), |_| r.random_range(-1.0..1.0));
    let labels = (0..n).map(|v| usize::from(x[[v, 0]] > 0.0)).collect();
    SparseGraph::new(n, &[], false, x, labels, 2, None).unwrap()
}

#[test]
fn edgeless_grid_breaks_radius_ties_toward_the_smallest() {
    let g = sign_task(60, 1);
    let prepared = prepare_graph("sign", g, false, false).unwrap();
    let mut spec = ExperimentSpec::new("sign", ".");
    spec.grid = Grid {
        radius_multiples: vec![4.0, 0.5, 2.0],
        input_scalings: vec![1.0],
        units: vec![8],
        lambdas: vec![1e-3],
    };
    spec.seeds = vec![0, 1];
    spec.bootstrap.resamples = 50;
    let outcome = grid_search_prepared(&prepared, &spec, |_| Ok(())).unwrap();
    let vals: Vec<f64> = outcome.summaries.iter().map(|s| s.mean_val_accuracy).collect();
    assert!(vals.iter().all(|&v| v == vals[0]), "{vals:?}");
    assert_eq!(outcome.best.point.radius_multiple, 0.5);
    assert!(outcome.best.mean_val_accuracy > 0.8);
}

fn small_community_graph(seed: u64) -> SparseGraph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let labels: Vec<usize> = (0..n).map(|v| v % 2).collect();
    let mut arcs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if labels[a] == labels[b] { 0.2 } else { 0.03 };
            if r.random_bool(p) {
                arcs.push((a, b));
            }
        }
    }
    let x = Array2::from_shape_fn((n, 4), |(v, j)| r.random_range(-1.0..1.0) + if j == labels[v] { 0.3 } else { 0.0 });
    SparseGraph::new(n, &arcs, false, x, labels, 2, None).unwrap()
}

#[test]
fn selection_ignores_grid_order() {
    let prepared = prepare_graph("comm", small_community_graph(3), false, false).unwrap();
    let mut spec = ExperimentSpec::new("comm", ".");
    spec.grid = Grid {
        radius_multiples: vec![0.5, 2.0],
        input_scalings: vec![0.1, 1.0],
        units: vec![4, 8],
        lambdas: vec![1e-3, 1.0],
    };
    spec.seeds = vec![0, 1];
    spec.bootstrap.resamples = 20;
    spec.iterations = 20;
    let base = grid_search_prepared(&prepared, &spec, |_| Ok(())).unwrap();
    assert_eq!(base.results.len(), 32);

    let mut shuffled = spec.clone();
    shuffled.grid.radius_multiples.reverse();
    shuffled.grid.input_scalings.reverse();
    shuffled.grid.units.reverse();
    shuffled.grid.lambdas.reverse();
    let other = grid_search_prepared(&prepared, &shuffled, |_| Ok(())).unwrap();
    assert_eq!(base.best.point, other.best.point);
    assert_eq!(base.best.mean_val_accuracy, other.best.mean_val_accuracy);

    // Every run in the grid equals the matching standalone run.
    let r = &base.results[5];
    let single = run_point(&prepared, &spec, &r.point, r.seed).unwrap();
    assert_eq!(without_timings(single), without_timings(r.clone()));
}

#[test]
fn failing_grid_points_are_excluded() {
    // λ = 0 with more units than training nodes is singular on a rank-deficient embedding.
    let g = sign_task(20, 2).with_features(Array2::zeros((20, 3))).unwrap();
    let prepared = prepare_graph("zeros", g, false, false).unwrap();
    let mut spec = ExperimentSpec::new("zeros", ".");
    spec.grid = Grid {
        radius_multiples: vec![1.0],
        input_scalings: vec![1.0],
        units: vec![4],
        lambdas: vec![0.0, 1.0],
    };
    spec.seeds = vec![0];
    spec.bootstrap.resamples = 10;
    let outcome = grid_search_prepared(&prepared, &spec, |_| Ok(())).unwrap();
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].point.lambda, 0.0);
    assert!(outcome.failures[0].error.contains("stage `fit`"), "{}", outcome.failures[0].error);
    assert_eq!(outcome.best.point.lambda, 1.0);
    assert!(!outcome.summaries[0].complete);
}

#[test]
fn phase_times_account_for_the_run() {
    let g = common::texas_like_graph(9);
    let prepared = prepare_graph("texas-like", g, false, false).unwrap();
    let mut spec = ExperimentSpec::new("texas-like", ".");
    spec.bootstrap.resamples = 1000;
    let point = GridPoint {
        radius_multiple: 6.0,
        input_scaling: 1.0,
        units: 256,
        lambda: 1e-3,
    };
    let r = run_point(&prepared, &spec, &point, 0).unwrap();
    let t = r.timings;
    let phases = t.embed + t.fit + t.eval;
    assert!(phases <= t.total && phases >= 0.9 * t.total, "{t:?}");
}

#[test]
fn embedding_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec();
    let prepared = prepare(&spec).unwrap();
    let point = spec.grid.points()[0];

    let zero = export_embeddings(&prepared, &spec, &point, 7, &[0], dir.path(), DumpFormat::Binary).unwrap();
    let (k, states) = read_embedding_dump(&zero[0], DumpFormat::Binary).unwrap();
    assert_eq!(k, 0);
    assert_eq!(states, Array2::<f64>::zeros((4, 3)));

    let paths = export_embeddings(&prepared, &spec, &point, 7, &[1, 10, 100], dir.path(), DumpFormat::Binary).unwrap();
    assert_eq!(paths.len(), 3);
    let sizes: Vec<u64> = paths.iter().map(|p| fs::metadata(p).unwrap().len()).collect();
    assert!(sizes.iter().all(|&s| s == sizes[0]), "{sizes:?}");
    let (k, last) = read_embedding_dump(&paths[2], DumpFormat::Binary).unwrap();
    assert_eq!(k, 100);
    let run = gesn_core::reservoir::compute_embeddings(
        &prepared.graph,
        &gesn_core::reservoir::init_reservoir(
            &gesn_core::ReservoirConfig::new(4, 0.5, prepared.target_radius(2.0), 7),
            2,
        )
        .unwrap(),
        &gesn_core::ReservoirConfig::new(4, 0.5, prepared.target_radius(2.0), 7),
    )
    .unwrap();
    assert_eq!(last, run.states);

    // Without edges the state is stationary from the first step on.
    let edgeless = prepare_graph("edgeless", sign_task(5, 4), false, false).unwrap();
    let mut spec = ExperimentSpec::new("edgeless", ".");
    spec.iterations = 100;
    let paths = export_embeddings(&edgeless, &spec, &point, 1, &[1, 10, 100], dir.path(), DumpFormat::Text).unwrap();
    let bodies: Vec<Array2<f64>> = paths
        .iter()
        .map(|p| read_embedding_dump(p, DumpFormat::Text).unwrap().1)
        .collect();
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[1], bodies[2]);
    let strip_header = |p: &PathBuf| {
        let bytes = fs::read(p).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        bytes[nl..].to_vec()
    };
    assert_eq!(strip_header(&paths[0]), strip_header(&paths[2]));
}

#[test]
fn heatmap_from_a_grid() {
    let prepared = prepare_graph("comm", small_community_graph(5), false, false).unwrap();
    let mut spec = ExperimentSpec::new("comm", ".");
    spec.grid = Grid {
        radius_multiples: vec![0.5, 2.0],
        input_scalings: vec![0.1, 1.0],
        units: vec![8],
        lambdas: vec![1e-3],
    };
    spec.seeds = vec![0, 1, 2];
    spec.bootstrap.resamples = 50;
    spec.iterations = 20;
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("results.jsonl");
    let outcome = grid_search_prepared(&prepared, &spec, |r| bench::append_jsonl(&jsonl, std::slice::from_ref(r))).unwrap();
    let results = bench::read_jsonl(&jsonl).unwrap();
    assert_eq!(results, outcome.results);

    let csv = dir.path().join("heatmap.csv");
    let cells = bench::export_heatmap(&results, Default::default(), &csv).unwrap();
    assert_eq!(cells.len(), 4);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with(bench::HEATMAP_CSV_HEADER));
    for c in &cells {
        assert!(c.ci_low <= c.mean_test_accuracy + 1e-12 && c.mean_test_accuracy <= c.ci_high + 1e-12);
    }

    let mut summary = Vec::new();
    bench::write_summary_csv(&mut summary, &outcome.summaries).unwrap();
    assert_eq!(String::from_utf8(summary).unwrap().lines().count(), 5);
}
