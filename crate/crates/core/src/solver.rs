//! The distance-minimizing fixed-point iteration `z ← P_D(P_C(z))`.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_k, BoundaryConditions, Mesh, SystemMatrices};
use crate::matgen::{substream, MaterialDataset};
use crate::nn::{should_skip_with, DeltaRule, NnIndex, QueryParams, QueryResult};
use crate::phase::{global_distance_sq, map_point, MappedPoint, MetricC, PhaseState};

/// Relative decrease of the global distance below which a window of
/// iterations counts as stagnant.
pub const STAGNATION_TOLERANCE: f64 = 1e-10;
pub const STAGNATION_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceMode {
    /// Stop when no assignment changes; meaningful with exact queries.
    #[default]
    AssignmentFixedPoint,
    /// Stop when the global distance stops decreasing.
    Stagnation,
    /// Always run `max_iterations`.
    MaxIter,
}

/// When a query may be answered from the previous iteration's result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipPolicy {
    #[default]
    Off,
    /// Only when the stored runner-up distance is exact, so the skip is safe.
    Exact,
    /// Also with approximate runner-ups (graph search); heuristic.
    All,
}

/// Accuracy parameter per iteration.
pub trait FdSchedule: Send + Sync {
    /// `i` starts at 1; `last_global_d2` is the previous iteration's value.
    fn f_d(&self, i: usize, last_global_d2: Option<f64>) -> f64;
}

/// Linear ramp from `fd_start` at iteration 1 to `fd_final` at iteration
/// `ramp`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSchedule {
    #[serde(default)]
    pub fd_start: f64,
    pub fd_final: f64,
    #[serde(default = "one")]
    pub ramp: usize,
}

fn one() -> usize {
    1
}

impl RampSchedule {
    pub fn constant(f_d: f64) -> Self {
        Self { fd_start: f_d, fd_final: f_d, ramp: 1 }
    }

    /// Ramp from zero, as used for the accuracy-scheduled runs.
    pub fn linear(fd_final: f64, ramp: usize) -> Self {
        Self { fd_start: 0.0, fd_final, ramp }
    }
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl FdSchedule for RampSchedule {
    fn f_d(&self, i: usize, _last_global_d2: Option<f64>) -> f64 {
        if self.ramp <= 1 {
            return self.fd_final;
        }
        let t = ((i.max(1) - 1) as f64 / (self.ramp - 1) as f64).min(1.0);
        self.fd_start + (self.fd_final - self.fd_start) * t
    }
}

pub fn schedule_fd(cfg: &DdConfig, i: usize, last_global_d2: Option<f64>) -> f64 {
    cfg.schedule.f_d(i, last_global_d2)
}

fn default_max_iterations() -> usize {
    30
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdConfig {
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub schedule: RampSchedule,
    /// Graph step bound.
    #[serde(default)]
    pub f_s: Option<usize>,
    /// Start graph queries at the previous assignment.
    #[serde(default = "yes")]
    pub warm_start: bool,
    #[serde(default)]
    pub skip: SkipPolicy,
    #[serde(default)]
    pub delta_rule: DeltaRule,
    #[serde(default)]
    pub convergence: ConvergenceMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DdConfig {
    fn default() -> Self {
        Self {
            max_iterations: default_max_iterations(),
            schedule: RampSchedule::default(),
            f_s: None,
            warm_start: true,
            skip: SkipPolicy::Off,
            delta_rule: DeltaRule::Corrected,
            convergence: ConvergenceMode::AssignmentFixedPoint,
            seed: 0,
        }
    }
}

impl DdConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if s.ramp == 0 || !(0.0..=1.0).contains(&s.fd_final) || !(0.0..=1.0).contains(&s.fd_start) {
            return Err(Error::Config(format!("invalid schedule {s:?}")));
        }
        if self.f_s == Some(0) {
            return Err(Error::Config("f_s must be at least 1".into()));
        }
        Ok(())
    }
}

/// Statistics of one solver iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterationRecord {
    pub iter: usize,
    /// Global distance between the constraint states and their assigned
    /// data states after the data projection.
    pub global_d2: f64,
    pub t_assembly: Duration,
    pub t_rhs: Duration,
    pub t_solve: Duration,
    pub t_query: Duration,
    pub comparisons: u64,
    pub hops: u64,
    pub skips: u64,
    pub f_d: f64,
}

#[derive(Debug, Clone)]
pub struct DdState {
    /// Data id assigned to every integration point.
    pub assignments: Vec<usize>,
    /// Constraint-set states of the last iteration.
    pub y: Vec<PhaseState>,
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
    /// Warm-start ids handed to the last round of queries.
    pub warm_starts: Vec<usize>,
    /// Mapped query points and results of the last iteration.
    pub last_queries: Vec<MappedPoint>,
    pub last_results: Vec<QueryResult>,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    FixedPoint,
    Stagnation,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct DdOutcome {
    pub state: DdState,
    pub converged: bool,
    pub reason: StopReason,
}

/// Mesh, boundary conditions and the factorized operator; reusable across
/// runs that share a metric.
pub struct DdProblem {
    pub mesh: Mesh,
    pub bcs: BoundaryConditions,
    pub system: SystemMatrices,
    /// Nodal forces over all dofs; `None` is zero.
    pub forces: Option<Vec<f64>>,
    weights: Vec<f64>,
    t_assembly: Duration,
}

impl DdProblem {
    pub fn new(mesh: Mesh, bcs: BoundaryConditions, metric: &MetricC) -> Result<Self> {
        let start = Instant::now();
        let system = assemble_k(&mesh, &bcs, metric)?;
        let t_assembly = start.elapsed();
        let weights = mesh.weights();
        Ok(Self { mesh, bcs, system, forces: None, weights, t_assembly })
    }

    pub fn metric(&self) -> &MetricC {
        self.system.metric()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn global_d2(&self, y: &[PhaseState], z: &[PhaseState]) -> Result<f64> {
        global_distance_sq(y, z, &self.weights, std::slice::from_ref(self.metric()))
    }
}

/// True when the last iteration meets the stopping rule of `mode`.
pub fn convergence_check(state: &DdState, previous_assignments: &[usize], mode: ConvergenceMode) -> bool {
    match mode {
        ConvergenceMode::AssignmentFixedPoint => state.assignments == previous_assignments,
        ConvergenceMode::Stagnation => stagnated(&state.records),
        ConvergenceMode::MaxIter => false,
    }
}

fn stagnated(records: &[IterationRecord]) -> bool {
    let n = records.len();
    if n <= STAGNATION_WINDOW {
        return false;
    }
    let old = records[n - 1 - STAGNATION_WINDOW].global_d2;
    let new = records[n - 1].global_d2;
    old - new <= STAGNATION_TOLERANCE * old
}

pub fn initial_assignments(n_points: usize, n_data: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, 0);
    (0..n_points).map(|_| rng.gen_range(0..n_data)).collect()
}

/// What an observer sees after the data projection of one iteration.
pub struct IterationView<'a> {
    pub iter: usize,
    pub queries: &'a [MappedPoint],
    pub results: &'a [QueryResult],
    /// Start ids handed to the index, when warm starts are on.
    pub warm_starts: Option<&'a [usize]>,
}

/// Optional overrides of a solver run.
#[derive(Default)]
pub struct SolveHooks<'a> {
    /// Replaces `cfg.schedule`.
    pub schedule: Option<&'a dyn FdSchedule>,
    /// Replaces the random initial assignment.
    pub initial: Option<Vec<usize>>,
    pub observer: Option<&'a mut dyn FnMut(&IterationView)>,
}

/// Runs the data-driven iteration with the schedule from `cfg`.
pub fn dd_solve(problem: &DdProblem, data: &MaterialDataset, index: &dyn NnIndex, cfg: &DdConfig) -> Result<DdOutcome> {
    dd_solve_with(problem, data, index, cfg, SolveHooks::default())
}

pub fn dd_solve_with(
    problem: &DdProblem,
    data: &MaterialDataset,
    index: &dyn NnIndex,
    cfg: &DdConfig,
    hooks: SolveHooks,
) -> Result<DdOutcome> {
    let SolveHooks { schedule, initial, mut observer } = hooks;
    let schedule = schedule.unwrap_or(&cfg.schedule);
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if index.len() != data.len() {
        return Err(Error::Contract(format!("index has {} points, dataset {}", index.len(), data.len())));
    }
    match data.metric() {
        Some(c) if c.matrix() == problem.metric().matrix() => {}
        _ => return Err(Error::Contract("dataset must be mapped with the problem's metric".into())),
    }
    let metric = problem.metric();
    let m = problem.mesh.n_points();
    let points = data.points();

    let mut assignments = match initial {
        Some(a) if a.len() != m || a.iter().any(|&i| i >= data.len()) => {
            return Err(Error::Contract("initial assignments do not match the mesh and dataset".into()))
        }
        Some(a) => a,
        None => initial_assignments(m, data.len(), cfg.seed),
    };
    let mut z: Vec<PhaseState> = assignments.iter().map(|&a| points[a]).collect();
    // Reference query and result of the last real search per point.
    let mut anchors: Vec<Option<(MappedPoint, QueryResult)>> = vec![None; m];
    let mut state = DdState {
        assignments: assignments.clone(),
        y: Vec::new(),
        u: Vec::new(),
        eta: Vec::new(),
        warm_starts: Vec::new(),
        last_queries: Vec::new(),
        last_results: Vec::new(),
        records: Vec::new(),
    };

    for i in 1..=cfg.max_iterations {
        let proj = problem.system.project_constraint(&problem.mesh, &problem.bcs, &z, problem.forces.as_deref())?;
        let f_d = schedule.f_d(i, state.records.last().map(|r| r.global_d2)).clamp(0.0, 1.0);

        let start = Instant::now();
        let queries: Vec<MappedPoint> = proj.states.par_iter().map(|s| map_point(s, metric)).collect();
        let outcomes: Vec<(QueryResult, bool)> = (0..m)
            .into_par_iter()
            .map(|p| {
                let q = &queries[p];
                if let Some((q_prev, prev)) = &anchors[p] {
                    let allowed = match cfg.skip {
                        SkipPolicy::Off => false,
                        SkipPolicy::Exact => prev.second_exact,
                        SkipPolicy::All => true,
                    };
                    if allowed && should_skip_with(prev, q_prev, q, cfg.delta_rule) {
                        let d = q.dist_sq(index.point(prev.best_id));
                        return (QueryResult::reused(prev, d), false);
                    }
                }
                let params = QueryParams {
                    f_d,
                    f_s: cfg.f_s,
                    warm_start: cfg.warm_start.then_some(assignments[p]),
                };
                (index.query(q, &params), true)
            })
            .collect();
        let t_query = start.elapsed();

        let mut record = IterationRecord {
            iter: i,
            t_assembly: if i == 1 { problem.t_assembly } else { Duration::ZERO },
            t_rhs: proj.t_rhs,
            t_solve: proj.t_solve,
            t_query,
            f_d,
            ..Default::default()
        };
        let previous = std::mem::take(&mut assignments);
        let mut results = Vec::with_capacity(m);
        for (p, (r, fresh)) in outcomes.into_iter().enumerate() {
            record.comparisons += r.comparisons;
            record.hops += r.hops;
            record.skips += r.skipped as u64;
            if fresh {
                anchors[p] = Some((queries[p], r));
            }
            assignments.push(r.best_id);
            results.push(r);
        }
        z = assignments.iter().map(|&a| points[a]).collect();
        record.global_d2 = problem.global_d2(&proj.states, &z)?;

        if let Some(obs) = observer.as_mut() {
            obs(&IterationView {
                iter: i,
                queries: &queries,
                results: &results,
                warm_starts: cfg.warm_start.then_some(&previous[..]),
            });
        }
        state.warm_starts = if cfg.warm_start { previous.clone() } else { Vec::new() };
        state.assignments = assignments.clone();
        state.y = proj.states;
        state.u = proj.u;
        state.eta = proj.eta;
        state.last_queries = queries;
        state.last_results = results;
        state.records.push(record);

        let fixed = assignments == previous;
        let stop = match cfg.convergence {
            ConvergenceMode::AssignmentFixedPoint => fixed.then_some(StopReason::FixedPoint),
            ConvergenceMode::Stagnation if fixed => Some(StopReason::FixedPoint),
            ConvergenceMode::Stagnation => stagnated(&state.records).then_some(StopReason::Stagnation),
            ConvergenceMode::MaxIter => None,
        };
        if let Some(reason) = stop {
            return Ok(DdOutcome { state, converged: true, reason });
        }
    }
    Ok(DdOutcome { state, converged: false, reason: StopReason::MaxIterations })
}
