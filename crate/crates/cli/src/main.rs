use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddmech::bench::{self, csv, ExperimentSpec, RunSpec};
use ddmech::dataset_io::{encode_csv, encode_mdd, load_dataset};
use ddmech::matgen::sample_dataset;
use ddmech::nn::serialize::{encode_graph, encode_kdtree, encode_kmeans, write_new};
use ddmech::nn::{build_knn_graph, BackendSpec, GraphBuilder, KMeansTree, KdTree, LinearIndex, DEFAULT_BRANCHING, DEFAULT_LEAF_SIZE};
use ddmech::phase::pca_metric_or_fallback;
use ddmech::{Error, Result};

/// Data-driven solid mechanics with scheduled nearest-neighbor search.
#[derive(Parser)]
#[command(name = "ddmech", version)]
struct Cli {
    /// TOML configuration (run config for gen/index/solve, experiment spec for bench).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for queries and assembly.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a material dataset (.mdd, or .csv by extension).
    Gen {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build an index over a dataset and write it to --out.
    Index {
        #[arg(long)]
        data: PathBuf,
        /// kdtree, kmeans or graph.
        #[arg(long)]
        backend: Option<String>,
    },
    /// Run one data-driven solve; writes the run CSV to --out or stdout.
    Solve {
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        fd_final: Option<f64>,
        /// Iterations over which f_d ramps up from zero.
        #[arg(long)]
        ramp: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-point distances and comparisons of --scatter-iter.
        #[arg(long, requires = "scatter_iter")]
        scatter: Option<PathBuf>,
        #[arg(long)]
        scatter_iter: Option<usize>,
    },
    /// Run an experiment grid; results go to --out or the spec's output_dir.
    Bench { spec: Option<PathBuf> },
    /// Aggregate the run CSVs of a results directory.
    Report { dir: PathBuf },
}

fn run_spec(cli: &Cli) -> Result<RunSpec> {
    match &cli.config {
        Some(p) => RunSpec::load(p),
        None => Ok(RunSpec::default()),
    }
}

fn need_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn backend_override(current: &BackendSpec, name: &str) -> Result<BackendSpec> {
    if current.name() == name {
        Ok(current.clone())
    } else {
        BackendSpec::from_name(name)
    }
}

fn gen(cli: &Cli, n: Option<usize>) -> Result<()> {
    let spec = run_spec(cli)?;
    let out = need_out(cli)?;
    let n = n.unwrap_or(spec.dataset.size);
    let seed = cli.seed.unwrap_or(spec.dataset.seed);
    let d = sample_dataset(n, spec.material.bounds, &spec.material.params()?, seed)?;
    let bytes = match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => encode_csv(&d).into_bytes(),
        _ => encode_mdd(&d),
    };
    write_new(out, &bytes)
}

fn index(cli: &Cli, data: &Path, backend: Option<&str>) -> Result<()> {
    let spec = run_spec(cli)?;
    let out = need_out(cli)?;
    let backend = match backend {
        Some(name) => backend_override(&spec.backend, name)?,
        None if cli.config.is_some() => spec.backend.clone(),
        None => BackendSpec::from_name("kdtree")?,
    };
    backend.validate()?;
    let mut d = load_dataset(data)?;
    d.bind_metric(pca_metric_or_fallback(d.points(), spec.material.fallback_scale));
    let bytes = match backend {
        BackendSpec::Linear => return Err(Error::Config("the linear backend has no index to write".into())),
        BackendSpec::Kdtree { leaf_size } => encode_kdtree(&KdTree::build(&d, leaf_size)?),
        BackendSpec::Kmeans { k, seed } => encode_kmeans(&KMeansTree::build(&d, k, seed)?),
        BackendSpec::Graph { k, builder, builder_fd, seed } => {
            let g = match builder {
                GraphBuilder::Linear => build_knn_graph(&d, k, &LinearIndex::build(&d)?, builder_fd, seed)?,
                GraphBuilder::Kdtree => build_knn_graph(&d, k, &KdTree::build(&d, DEFAULT_LEAF_SIZE)?, builder_fd, seed)?,
                GraphBuilder::Kmeans => {
                    build_knn_graph(&d, k, &KMeansTree::build(&d, DEFAULT_BRANCHING, seed)?, builder_fd, seed)?
                }
            };
            encode_graph(&g)
        }
    };
    write_new(out, &bytes)
}

#[allow(clippy::too_many_arguments)]
fn solve(
    cli: &Cli,
    backend: Option<&str>,
    fd_final: Option<f64>,
    ramp: Option<usize>,
    data: Option<&Path>,
    scatter: Option<&Path>,
    scatter_iter: Option<usize>,
) -> Result<()> {
    let mut spec = run_spec(cli)?;
    if let Some(name) = backend {
        spec.backend = backend_override(&spec.backend, name)?;
    }
    if let Some(f) = fd_final {
        spec.solver.schedule.fd_final = f;
        spec.solver.schedule.fd_start = spec.solver.schedule.fd_start.min(f);
    }
    if let Some(r) = ramp {
        spec.solver.schedule.ramp = r;
    }
    if let Some(seed) = cli.seed {
        spec.solver.seed = seed;
    }
    if let Some(p) = data {
        spec.dataset.path = Some(p.to_path_buf());
    }
    if scatter_iter.is_some() {
        spec.scatter_iteration = scatter_iter;
    }
    spec.validate()?;
    let out = spec.run()?;
    let text = csv::records_csv(&out.outcome.state.records);
    match &cli.out {
        Some(p) => write_new(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    if let Some(p) = scatter {
        let rows = out.scatter.ok_or_else(|| {
            Error::Config(format!("the run stopped before iteration {}", scatter_iter.unwrap_or_default()))
        })?;
        write_new(p, csv::scatter_csv(&rows).as_bytes())?;
    }
    let last = out.outcome.state.records.last().expect("at least one iteration");
    eprintln!(
        "{} iterations, converged: {}, global d2 {:e}",
        out.outcome.state.records.len(),
        out.outcome.converged,
        last.global_d2
    );
    Ok(())
}

fn bench_cmd(cli: &Cli, spec_path: Option<&Path>) -> Result<()> {
    let path = spec_path
        .or(cli.config.as_deref())
        .ok_or_else(|| Error::Config("an experiment spec is required".into()))?;
    let spec = ExperimentSpec::load(path)?;
    let out = cli
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (--out or output_dir)".into()))?;
    let report = bench::run_experiment(&spec, &out)?;
    for (run, err) in &report.failures {
        eprintln!("run {run} failed: {err}");
    }
    eprintln!("{} runs written to {}", report.runs.len(), out.display());
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let (_, summary) = bench::report_dir(dir)?;
    print!("{}", std::fs::read_to_string(summary)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Gen { n } => gen(&cli, *n),
        Command::Index { data, backend } => index(&cli, data, backend.as_deref()),
        Command::Solve { backend, fd_final, ramp, data, scatter, scatter_iter } => solve(
            &cli,
            backend.as_deref(),
            *fd_final,
            *ramp,
            data.as_deref(),
            scatter.as_deref(),
            *scatter_iter,
        ),
        Command::Bench { spec } => bench_cmd(&cli, spec.as_deref()),
        Command::Report { dir } => report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
