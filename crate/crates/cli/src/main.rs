use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gesn_core::bench::{
    self, BootstrapSpec, DumpFormat, ExperimentSpec, Grid, GridPoint, HeatmapSlice, SplitSource,
};
use gesn_core::dataset::DEFAULT_SPLIT_FRACTIONS;
use gesn_core::graph::graph_stats;
use gesn_core::Aggregation;

#[derive(Parser)]
#[command(name = "gesn", version, about = "Graph Echo State Network node classification benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and report validation and test accuracy.
    Run(RunArgs),
    /// Grid search with selection on seed-averaged validation accuracy.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for results.jsonl, summary.csv and best.json.
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing results.jsonl instead of refusing to run.
        #[arg(long)]
        overwrite: bool,
    },
    /// Radius x input scaling table of test accuracy from a results file.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reservoir units to slice on; required when results hold several.
        #[arg(long)]
        units: Option<usize>,
        /// Ridge lambda to slice on; required when results hold several.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Dump node states at selected iterations for external plotting.
    EmbedDump(EmbedArgs),
    /// Graph statistics next to the published reference values.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Exit nonzero when the statistics do not match the reference.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, env = "GESN_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
    /// Symmetrize arcs before use.
    #[arg(long)]
    undirected: bool,
    /// Restrict to the largest weakly connected component.
    #[arg(long)]
    lcc: bool,
}

#[derive(Args)]
struct PointArgs {
    /// Reservoir radius as a multiple of 1/alpha.
    #[arg(long)]
    radius_mult: f64,
    #[arg(long)]
    scaling: f64,
    #[arg(long)]
    units: usize,
    #[arg(long = "K", default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AggregationArg::In)]
    aggregation: AggregationArg,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    point: PointArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long, conflicts_with_all = ["split_frac", "split_seed"])]
    split_file: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split_frac: Option<Vec<f64>>,
    /// Split seed; defaults to the run seed.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Shuffle all nodes together instead of per class.
    #[arg(long)]
    no_stratify: bool,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Append the result as one JSON line to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    In,
    Out,
    Both,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::In => Aggregation::In,
            AggregationArg::Out => Aggregation::Out,
            AggregationArg::Both => Aggregation::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Text,
}

fn base_spec(data: &DataArgs, point: &PointArgs, lambda: f64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(&data.dataset, &data.data_dir);
    spec.undirected = data.undirected;
    spec.lcc = data.lcc;
    spec.grid = Grid::single(GridPoint {
        radius_multiple: point.radius_mult,
        input_scaling: point.scaling,
        units: point.units,
        lambda,
    });
    spec.iterations = point.iterations;
    spec.seeds = vec![point.seed];
    spec.aggregation = point.aggregation.into();
    spec
}

fn run(args: RunArgs) -> Result<()> {
    let mut spec = base_spec(&args.data, &args.point, args.lambda);
    spec.split = match args.split_file {
        Some(path) => SplitSource::File { path },
        None => {
            let fractions = match args.split_frac.as_deref() {
                Some(&[a, b, c]) => (a, b, c),
                Some(_) => bail!("--split-frac takes three comma-separated fractions"),
                None => DEFAULT_SPLIT_FRACTIONS,
            };
            SplitSource::Generated {
                fractions,
                seed: args.split_seed,
                stratified: !args.no_stratify,
            }
        }
    };
    spec.bootstrap = BootstrapSpec {
        resamples: args.bootstrap,
        confidence: args.confidence,
    };
    let result = bench::run_single(&spec)?;
    if let Some(out) = &args.out {
        bench::append_jsonl(out, std::slice::from_ref(&result))?;
    }
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn grid(spec_path: PathBuf, out: PathBuf, overwrite: bool) -> Result<()> {
    let spec = ExperimentSpec::from_json_file(&spec_path)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let results_path = out.join("results.jsonl");
    if results_path.exists() && !overwrite {
        bail!("{} already exists; pass --overwrite to replace it", results_path.display());
    }
    let file = File::create(&results_path).with_context(|| format!("creating {}", results_path.display()))?;
    drop(file);
    let total = spec.grid.len() * spec.seeds.len();
    let mut done = 0usize;
    let outcome = bench::grid_search(&spec, |r| {
        done += 1;
        log::info!(
            "[{done}/{total}] H={} radius={} scaling={} lambda={} seed={}: val {:.4} test {:.4}",
            r.point.units,
            r.point.radius_multiple,
            r.point.input_scaling,
            r.point.lambda,
            r.seed,
            r.val_accuracy,
            r.test_accuracy
        );
        bench::append_jsonl(&results_path, std::slice::from_ref(r))
    })?;

    let summary_path = out.join("summary.csv");
    let mut summary = BufWriter::new(File::create(&summary_path)?);
    bench::write_summary_csv(&mut summary, &outcome.summaries)?;
    summary.flush()?;

    let best = serde_json::json!({
        "best": outcome.best,
        "runs": outcome.best_runs,
        "failures": outcome.failures,
    });
    fs::write(out.join("best.json"), serde_json::to_string_pretty(&best)?)?;
    if !outcome.failures.is_empty() {
        log::warn!("{} grid runs failed; see best.json", outcome.failures.len());
    }
    println!("{}", serde_json::to_string_pretty(&outcome.best)?);
    Ok(())
}

fn heatmap(input: PathBuf, out: PathBuf, units: Option<usize>, lambda: Option<f64>) -> Result<()> {
    let results = bench::read_jsonl(&input)?;
    let cells = bench::export_heatmap(&results, HeatmapSlice { units, lambda }, &out)?;
    println!("wrote {} cells to {}", cells.len(), out.display());
    Ok(())
}

fn embed_dump(args: EmbedArgs) -> Result<()> {
    // λ plays no part in the states.
    let spec = base_spec(&args.data, &args.point, 0.0);
    spec.validate()?;
    let prepared = bench::prepare(&spec)?;
    let format = match args.format {
        FormatArg::Binary => DumpFormat::Binary,
        FormatArg::Text => DumpFormat::Text,
    };
    let point = spec.grid.points()[0];
    let paths = bench::export_embeddings(&prepared, &spec, &point, args.point.seed, &args.checkpoints, &args.out, format)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn stats(data: DataArgs, check: bool) -> Result<()> {
    let mut spec = ExperimentSpec::new(&data.dataset, &data.data_dir);
    spec.undirected = data.undirected;
    spec.lcc = data.lcc;
    let prepared = bench::prepare(&spec)?;
    let computed = graph_stats(&prepared.graph)?;
    let cmp = bench::compare_stats(&data.dataset, computed);
    let c = &cmp.computed;
    println!("dataset     {}", data.dataset);
    if let Some(sum) = &prepared.source_checksum {
        println!("checksum    {sum}");
    }
    match &cmp.reference {
        Some(r) => {
            println!("{:<12}{:>14}{:>14}", "", "computed", "reference");
            println!("{:<12}{:>14}{:>14}", "nodes", c.num_nodes, r.nodes);
            println!("{:<12}{:>14}{:>14}", "edges", c.num_edges, r.edges);
            println!("{:<12}{:>14}{:>14}", "arcs", c.num_arcs, "");
            println!("{:<12}{:>14.4}{:>14.2}", "homophily", c.edge_homophily, r.homophily);
            println!("{:<12}{:>14.4}{:>14.2}", "radius", c.spectral_radius, r.spectral_radius);
            println!("{:<12}{:>14}{:>14}", "features", c.num_features, r.features);
            println!("{:<12}{:>14}{:>14}", "classes", c.num_classes, r.classes);
            let convention = match cmp.edge_convention {
                Some(bench::EdgeConvention::UnorderedPairs) => "unordered pairs",
                Some(bench::EdgeConvention::StoredArcs) => "stored arcs",
                None => "none",
            };
            println!("edge count convention matched: {convention}");
            println!("{}", if cmp.passes() { "MATCH" } else { "MISMATCH" });
        }
        None => println!("{}", serde_json::to_string_pretty(c)?),
    }
    if check && !cmp.passes() {
        bail!("statistics of {} do not match the reference", data.dataset);
    }
    Ok(())
}

/// Joins the error chain, dropping causes whose text the outer message already carries.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Grid { spec, out, overwrite } => grid(spec, out, overwrite),
        Command::Heatmap {
            input,
            out,
            units,
            lambda,
        } => heatmap(input, out, units, lambda),
        Command::EmbedDump(args) => embed_dump(args),
        Command::Stats { data, check } => stats(data, check),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
