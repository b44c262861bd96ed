//! Experiment grids over datasets, backends and accuracy settings, with CSV
//! output of every run.

pub mod csv;
pub mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{twist_bcs, Mesh};
use crate::matgen::{sample_dataset, MaterialDataset, MaterialParams, DEFAULT_BOUNDS};
use crate::nn::BackendSpec;
use crate::phase::pca_metric_or_fallback;
use crate::solver::{dd_solve_with, DdConfig, DdOutcome, DdProblem, IterationView, RampSchedule, SolveHooks};

use self::csv::{
    aggregate, aggregate_csv, parse_run_csv, records_csv, scatter_csv, scatter_rows, summary_csv, RunRow, ScatterRow,
};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ERRORS_FILE: &str = "errors.csv";
/// Separates the group label from the seed in run file names.
pub const SEED_TAG: &str = "__seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    RefinementStudy,
    FdSweep,
    KmeansSweep,
    GraphSweep,
    BackendComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    #[serde(default = "default_side")]
    pub side: f64,
    #[serde(default = "default_n_edge")]
    pub n_edge: usize,
    #[serde(default = "default_theta")]
    pub theta_deg: f64,
}

fn default_side() -> f64 {
    10.0
}
fn default_n_edge() -> usize {
    5
}
fn default_theta() -> f64 {
    2.0
}

impl Default for MeshSpec {
    fn default() -> Self {
        Self { side: default_side(), n_edge: default_n_edge(), theta_deg: default_theta() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    #[serde(default = "default_e")]
    pub e: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_bounds")]
    pub bounds: (f64, f64),
    /// Scale of the identity metric used when the PCA metric fails.
    #[serde(default = "default_e")]
    pub fallback_scale: f64,
}

fn default_e() -> f64 {
    1000.0
}
fn default_alpha() -> f64 {
    500.0
}
fn default_bounds() -> (f64, f64) {
    DEFAULT_BOUNDS
}

impl Default for MaterialSpec {
    fn default() -> Self {
        Self { e: default_e(), alpha: default_alpha(), bounds: DEFAULT_BOUNDS, fallback_scale: default_e() }
    }
}

impl MaterialSpec {
    pub fn params(&self) -> Result<MaterialParams> {
        MaterialParams::new(self.e, self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub mesh: MeshSpec,
    #[serde(default)]
    pub material: MaterialSpec,
    #[serde(default)]
    pub solver: DdConfig,
    /// Backend of refinement studies and f_d sweeps.
    #[serde(default)]
    pub backend: Option<BackendSpec>,
    /// Backends of a backend comparison.
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    /// Final f_d values; each uses the solver's ramp length.
    #[serde(default)]
    pub fd_values: Vec<f64>,
    /// Graph degrees of a graph sweep.
    #[serde(default)]
    pub graph_k: Vec<usize>,
    /// Graph step bounds; 0 stands for no bound.
    #[serde(default)]
    pub fs_values: Vec<usize>,
    /// Also write per-point comparisons and distances of this iteration.
    #[serde(default)]
    pub scatter_iteration: Option<usize>,
}

/// One cell of the experiment grid; run once per size and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub backend: BackendSpec,
    pub schedule: RampSchedule,
    pub f_s: Option<usize>,
}

impl GridPoint {
    pub fn label(&self, n: usize) -> String {
        let mut s = format!("n{n}_{}", self.backend.name());
        match &self.backend {
            BackendSpec::Linear => {}
            BackendSpec::Kdtree { leaf_size } => s += &format!("-l{leaf_size}"),
            BackendSpec::Kmeans { k, .. } => s += &format!("-k{k}"),
            BackendSpec::Graph { k, .. } => s += &format!("-k{k}"),
        }
        s += &format!("_fd{}", self.schedule.fd_final);
        if self.schedule.ramp > 1 {
            s += &format!("-r{}", self.schedule.ramp);
        }
        if let Some(fs) = self.f_s {
            s += &format!("_fs{fs}");
        }
        s
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config("sizes must be non-empty and positive".into()));
        }
        if self.mesh.n_edge == 0 || !(self.mesh.side > 0.0) || !self.mesh.theta_deg.is_finite() {
            return Err(Error::Config(format!("invalid mesh {:?}", self.mesh)));
        }
        self.material.params()?;
        let (lo, hi) = self.material.bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config("invalid strain bounds".into()));
        }
        if !(self.material.fallback_scale > 0.0) {
            return Err(Error::Config("fallback_scale must be positive".into()));
        }
        self.solver.validate()?;
        if self.fd_values.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("fd_values must lie in [0, 1]".into()));
        }
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Config(what.to_string())) };
        match self.experiment {
            Experiment::FdSweep | Experiment::KmeansSweep => need(!self.fd_values.is_empty(), "fd_values required")?,
            Experiment::GraphSweep => need(!self.graph_k.is_empty(), "graph_k required")?,
            Experiment::BackendComparison => need(!self.backends.is_empty(), "backends required")?,
            Experiment::RefinementStudy => {}
        }
        for p in self.grid()? {
            p.backend.validate()?;
        }
        Ok(())
    }

    fn schedules(&self) -> Vec<RampSchedule> {
        if self.fd_values.is_empty() {
            return vec![self.solver.schedule];
        }
        self.fd_values
            .iter()
            .map(|&f| RampSchedule { fd_start: self.solver.schedule.fd_start.min(f), fd_final: f, ..self.solver.schedule })
            .collect()
    }

    fn step_bounds(&self) -> Vec<Option<usize>> {
        if self.fs_values.is_empty() {
            return vec![self.solver.f_s];
        }
        self.fs_values.iter().map(|&s| (s > 0).then_some(s)).collect()
    }

    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        let backends: Vec<BackendSpec> = match self.experiment {
            Experiment::RefinementStudy => vec![self.backend.clone().unwrap_or_default()],
            Experiment::FdSweep => vec![self.backend.clone().unwrap_or(BackendSpec::from_name("kdtree")?)],
            Experiment::KmeansSweep => vec![self.backend.clone().unwrap_or(BackendSpec::from_name("kmeans")?)],
            Experiment::GraphSweep => {
                let base = match self.backend.clone() {
                    Some(b @ BackendSpec::Graph { .. }) => b,
                    Some(other) => return Err(Error::Config(format!("graph sweep needs a graph backend, got {}", other.name()))),
                    None => BackendSpec::from_name("graph")?,
                };
                self.graph_k
                    .iter()
                    .map(|&k| match base.clone() {
                        BackendSpec::Graph { builder, builder_fd, seed, .. } => BackendSpec::Graph { k, builder, builder_fd, seed },
                        _ => unreachable!(),
                    })
                    .collect()
            }
            Experiment::BackendComparison => self.backends.clone(),
        };
        let mut grid = Vec::new();
        for b in &backends {
            for s in self.schedules() {
                for f_s in self.step_bounds() {
                    grid.push(GridPoint { backend: b.clone(), schedule: s, f_s });
                }
            }
        }
        Ok(grid)
    }
}

fn default_dataset_size() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_dataset_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Load this `.mdd` or `.csv` file instead of sampling.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { size: default_dataset_size(), seed: 0, path: None }
    }
}

/// Configuration of a single solver run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub mesh: MeshSpec,
    #[serde(default)]
    pub material: MaterialSpec,
    #[serde(default)]
    pub solver: DdConfig,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub scatter_iteration: Option<usize>,
}

/// Result of [`RunSpec::run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outcome: DdOutcome,
    pub scatter: Option<Vec<ScatterRow>>,
}

impl RunSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.path.is_none() && self.dataset.size == 0 {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        if self.mesh.n_edge == 0 || !(self.mesh.side > 0.0) || !self.mesh.theta_deg.is_finite() {
            return Err(Error::Config(format!("invalid mesh {:?}", self.mesh)));
        }
        self.material.params()?;
        self.solver.validate()?;
        self.backend.validate()
    }

    pub fn dataset(&self) -> Result<MaterialDataset> {
        match &self.dataset.path {
            Some(p) => {
                let mut d = crate::dataset_io::load_dataset(p)?;
                d.bind_metric(pca_metric_or_fallback(d.points(), self.material.fallback_scale));
                Ok(d)
            }
            None => experiment_dataset(&self.material, self.dataset.size, self.dataset.seed),
        }
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.validate()?;
        let data = self.dataset()?;
        let mesh = Mesh::build(self.mesh.side, self.mesh.n_edge)?;
        let bcs = twist_bcs(&mesh, self.mesh.theta_deg)?;
        let problem = DdProblem::new(mesh, bcs, data.metric().unwrap())?;
        let index = self.backend.build(&data)?;
        let mut scatter = None;
        let mut observe = |v: &IterationView| {
            if Some(v.iter) == self.scatter_iteration {
                scatter = Some(scatter_rows(v.results));
            }
        };
        let hooks = SolveHooks { observer: Some(&mut observe), ..Default::default() };
        let outcome = dd_solve_with(&problem, &data, index.as_ref(), &self.solver, hooks)?;
        Ok(RunOutput { outcome, scatter })
    }
}

/// Files written by one experiment.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub runs: Vec<PathBuf>,
    pub scatters: Vec<PathBuf>,
    pub aggregate: PathBuf,
    pub summary: PathBuf,
    /// `(run label, error)` of runs that failed.
    pub failures: Vec<(String, String)>,
}

pub fn run_file_name(group: &str, seed: u64) -> String {
    format!("{group}{SEED_TAG}{seed}.csv")
}

/// Dataset of the given size and seed with its PCA metric bound.
pub fn experiment_dataset(material: &MaterialSpec, n: usize, seed: u64) -> Result<MaterialDataset> {
    let mut d = sample_dataset(n, material.bounds, &material.params()?, seed)?;
    d.bind_metric(pca_metric_or_fallback(d.points(), material.fallback_scale));
    Ok(d)
}

fn write_fresh(path: &Path, text: &str) -> Result<()> {
    crate::nn::serialize::write_new(path, text.as_bytes())
}

/// Runs the grid of `spec` and writes one CSV per run, the aggregate and
/// summary files, and `errors.csv` when runs fail. Refuses to write into a
/// directory that already holds results.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    if out.join(AGGREGATE_FILE).exists() {
        return Err(Error::Config(format!("{} already contains results", out.display())));
    }
    let grid = spec.grid()?;
    let mesh = Mesh::build(spec.mesh.side, spec.mesh.n_edge)?;
    let bcs = twist_bcs(&mesh, spec.mesh.theta_deg)?;
    let mut report = ExperimentReport::default();
    for &n in &spec.sizes {
        for &seed in &spec.seeds {
            let prepared = experiment_dataset(&spec.material, n, seed)
                .and_then(|d| DdProblem::new(mesh.clone(), bcs.clone(), d.metric().unwrap()).map(|p| (d, p)));
            let (data, problem) = match prepared {
                Ok(x) => x,
                Err(e) => {
                    for p in &grid {
                        report.failures.push((format!("{}{SEED_TAG}{seed}", p.label(n)), e.to_string()));
                    }
                    continue;
                }
            };
            for p in &grid {
                let group = p.label(n);
                let cfg = DdConfig { schedule: p.schedule, f_s: p.f_s, seed, ..spec.solver.clone() };
                let mut scatter = None;
                let result = p.backend.build(&data).and_then(|index| {
                    let mut observe = |v: &IterationView| {
                        if Some(v.iter) == spec.scatter_iteration {
                            scatter = Some(scatter_rows(v.results));
                        }
                    };
                    let hooks = SolveHooks { observer: Some(&mut observe), ..Default::default() };
                    dd_solve_with(&problem, &data, index.as_ref(), &cfg, hooks)
                });
                match result {
                    Ok(outcome) => {
                        let path = out.join(run_file_name(&group, seed));
                        write_fresh(&path, &records_csv(&outcome.state.records))?;
                        report.runs.push(path);
                        if let Some(rows) = scatter {
                            let path = out.join(format!("{group}{SEED_TAG}{seed}.scatter.csv"));
                            write_fresh(&path, &scatter_csv(&rows))?;
                            report.scatters.push(path);
                        }
                    }
                    Err(e) => report.failures.push((format!("{group}{SEED_TAG}{seed}"), e.to_string())),
                }
            }
        }
    }
    if !report.failures.is_empty() {
        let mut text = String::from("run,error\n");
        for (run, err) in &report.failures {
            text += &format!("{run},\"{}\"\n", err.replace('"', "'"));
        }
        write_fresh(&out.join(ERRORS_FILE), &text)?;
    }
    let (aggregate, summary) = report_dir(out)?;
    report.aggregate = aggregate;
    report.summary = summary;
    Ok(report)
}

/// Reads every run CSV in `dir`, grouped by the label before the seed tag.
pub fn collect_runs(dir: &Path) -> Result<BTreeMap<String, Vec<Vec<RunRow>>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".csv") && !name.ends_with(".scatter.csv") && name.contains(SEED_TAG)
        })
        .collect();
    files.sort();
    let mut groups: BTreeMap<String, Vec<Vec<RunRow>>> = BTreeMap::new();
    for path in files {
        let name = path.file_name().unwrap().to_str().unwrap();
        let group = name[..name.rfind(SEED_TAG).unwrap()].to_string();
        let rows = parse_run_csv(&fs::read_to_string(&path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        groups.entry(group).or_default().push(rows);
    }
    Ok(groups)
}

/// Writes the aggregate and summary files of the run CSVs in `dir`.
pub fn report_dir(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let groups = collect_runs(dir)?;
    let (agg, summary) = aggregate(&groups);
    let (a, s) = (dir.join(AGGREGATE_FILE), dir.join(SUMMARY_FILE));
    fs::write(&a, aggregate_csv(&agg))?;
    fs::write(&s, summary_csv(&summary))?;
    Ok((a, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFINEMENT: &str = r#"
experiment = "refinement-study"
sizes = [200, 400]
seeds = [1, 2, 3]

[mesh]
n_edge = 1

[solver]
max_iterations = 5

[backend]
kind = "kdtree"
"#;

    #[test]
    fn parses_and_builds_grid() {
        let spec = ExperimentSpec::from_toml(REFINEMENT).unwrap();
        assert_eq!(spec.grid().unwrap().len(), 1);
        assert_eq!(spec.mesh, MeshSpec { n_edge: 1, ..Default::default() });
        let sweep = r#"
experiment = "graph-sweep"
sizes = [100]
seeds = [1]
graph_k = [5, 10]
fs_values = [0, 1, 10]
"#;
        let g = ExperimentSpec::from_toml(sweep).unwrap().grid().unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[1].f_s, Some(1));
        assert_eq!(g[0].label(100), "n100_graph-k5_fd1");
    }

    #[test]
    fn single_run_spec() {
        let text = "[dataset]\nsize = 300\nseed = 4\n[mesh]\nn_edge = 1\n[solver]\nmax_iterations = 4\n[backend]\nkind = \"kmeans\"\n";
        let spec = RunSpec::from_toml(text).unwrap();
        assert_eq!(spec.backend, BackendSpec::Kmeans { k: 4, seed: 0 });
        let out = spec.run().unwrap();
        assert!(out.outcome.state.records.len() <= 4);
        assert!(RunSpec::from_toml("[dataset]\nsize = 0\n").is_err());
        assert!(RunSpec::from_toml("[solver]\nschedule = { fd_final = 2.0 }\n").is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ExperimentSpec::from_toml("experiment = \"refinement-study\"\nsizes = [10]\nseeds = []\n").is_err());
        assert!(ExperimentSpec::from_toml("experiment = \"fd-sweep\"\nsizes = [10]\nseeds = [1]\n").is_err());
        assert!(ExperimentSpec::from_toml("experiment = \"nope\"\nsizes = [10]\nseeds = [1]\n").is_err());
        assert!(ExperimentSpec::from_toml(&format!("{REFINEMENT}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn refinement_study_writes_runs_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::from_toml(REFINEMENT).unwrap();
        let report = run_experiment(&spec, dir.path()).unwrap();
        assert_eq!(report.runs.len(), 6);
        assert!(report.failures.is_empty());
        let groups = collect_runs(dir.path()).unwrap();
        assert_eq!(groups.len(), 2);
        let agg = csv::parse_aggregate_csv(&fs::read_to_string(&report.aggregate).unwrap()).unwrap();
        for row in &agg {
            let runs = &groups[&row.group];
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(row.iter - 1)).map(|r| r.global_d2).collect();
            assert_eq!(row.global_d2, stats::mean(&vals));
        }
        assert!(run_experiment(&spec, dir.path()).is_err());
    }
}
