use std::sync::Mutex;

use ddmech::bench::{experiment_dataset, MaterialSpec};
use ddmech::dataset_io::{decode_csv, decode_mdd, encode_csv, encode_mdd, load_dataset, save_dataset};
use ddmech::fem::{twist_bcs, Mesh};
use ddmech::nn::serialize::{decode_graph, decode_kdtree, decode_kmeans, encode_graph, encode_kdtree, encode_kmeans};
use ddmech::nn::{
    BuildStats, KMeansTree, KdTree, KnnGraph, LinearIndex, NnIndex, QueryParams, QueryResult, DEFAULT_LEAF_SIZE,
};
use ddmech::solver::{
    dd_solve, dd_solve_with, initial_assignments, ConvergenceMode, DdConfig, DdOutcome, DdProblem, IterationView,
    RampSchedule, SolveHooks,
};
use ddmech::{MappedPoint, MaterialDataset};

fn data(n: usize, seed: u64) -> MaterialDataset {
    experiment_dataset(&MaterialSpec::default(), n, seed).unwrap()
}

fn problem(d: &MaterialDataset, n_edge: usize) -> DdProblem {
    let mesh = Mesh::build(10.0, n_edge).unwrap();
    let bcs = twist_bcs(&mesh, 2.0).unwrap();
    DdProblem::new(mesh, bcs, d.metric().unwrap()).unwrap()
}

/// Records the warm-start id of every query it forwards.
struct Recording<'a> {
    inner: &'a dyn NnIndex,
    starts: Mutex<Vec<Option<usize>>>,
}

impl NnIndex for Recording<'_> {
    fn name(&self) -> &'static str {
        "recording"
    }
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn point(&self, id: usize) -> &MappedPoint {
        self.inner.point(id)
    }
    fn query(&self, q: &MappedPoint, params: &QueryParams) -> QueryResult {
        self.starts.lock().unwrap().push(params.warm_start);
        self.inner.query(q, params)
    }
    fn build_stats(&self) -> BuildStats {
        self.inner.build_stats()
    }
}

#[test]
fn warm_starts_are_previous_assignments() {
    let d = data(3000, 1);
    let p = problem(&d, 2);
    let kd = KdTree::build(&d, DEFAULT_LEAF_SIZE).unwrap();
    let rec = Recording { inner: &kd, starts: Mutex::new(Vec::new()) };
    let cfg = DdConfig { max_iterations: 4, convergence: ConvergenceMode::MaxIter, seed: 6, ..Default::default() };
    let mut previous = initial_assignments(p.mesh.n_points(), d.len(), cfg.seed);
    let mut seen = 0;
    let mut check = |v: &IterationView| {
        let mut starts: Vec<usize> =
            rec.starts.lock().unwrap().drain(..).map(|s| s.expect("warm start set")).collect();
        starts.sort_unstable();
        previous.sort_unstable();
        assert_eq!(starts, previous, "iteration {}", v.iter);
        previous = v.results.iter().map(|r| r.best_id).collect();
        seen += 1;
    };
    let hooks = SolveHooks { observer: Some(&mut check), ..Default::default() };
    dd_solve_with(&p, &d, &rec, &cfg, hooks).unwrap();
    assert_eq!(seen, 4);

    let cold = DdConfig { warm_start: false, ..cfg };
    let rec = Recording { inner: &kd, starts: Mutex::new(Vec::new()) };
    dd_solve(&p, &d, &rec, &cold).unwrap();
    assert!(rec.starts.into_inner().unwrap().iter().all(Option::is_none));
}

#[test]
fn index_files_round_trip_and_answer_identically() {
    let d = data(4000, 2);
    let queries: Vec<MappedPoint> = data(200, 3).mapped().to_vec();
    let kd = KdTree::build(&d, 8).unwrap();
    let km = KMeansTree::build(&d, 5, 9).unwrap();
    let lin = LinearIndex::build(&d).unwrap();
    let g = KnnGraph::build(d.mapped().to_vec(), 12, &lin, 1.0, 4).unwrap();

    let kd2 = decode_kdtree(&encode_kdtree(&kd), d.mapped()).unwrap();
    let km2 = decode_kmeans(&encode_kmeans(&km), d.mapped()).unwrap();
    let g2 = decode_graph(&encode_graph(&g), d.mapped()).unwrap();
    for q in &queries {
        for f_d in [0.0, 0.5, 1.0] {
            let p = QueryParams::with_fd(f_d);
            assert_eq!(kd.query(q, &p), kd2.query(q, &p));
            assert_eq!(km.query(q, &p), km2.query(q, &p));
        }
        let p = QueryParams { f_s: Some(3), ..QueryParams::exact() };
        assert_eq!(g.query(q, &p), g2.query(q, &p));
    }

    // Decoding against the wrong point set is rejected.
    let other = data(4001, 2);
    assert!(decode_kdtree(&encode_kdtree(&kd), other.mapped()).is_err());
}

#[test]
fn dataset_files_round_trip() {
    let d = data(500, 4);
    let back = decode_mdd(&encode_mdd(&d)).unwrap();
    assert_eq!(back.points(), d.points());
    let csv = decode_csv(&encode_csv(&d)).unwrap();
    assert_eq!(csv.points(), d.points());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mdd");
    save_dataset(&d, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap().points(), d.points());
}

#[test]
fn ramped_schedule_saves_comparisons() {
    let d = data(5000, 5);
    let p = problem(&d, 2);
    let kd = KdTree::build(&d, DEFAULT_LEAF_SIZE).unwrap();
    let run = |schedule| {
        let cfg = DdConfig { max_iterations: 10, schedule, convergence: ConvergenceMode::MaxIter, ..Default::default() };
        dd_solve(&p, &d, &kd, &cfg).unwrap()
    };
    let exact = run(RampSchedule::constant(1.0));
    let ramp = run(RampSchedule::linear(1.0, 5));
    let total = |o: &DdOutcome| o.state.records.iter().map(|r| r.comparisons).sum::<u64>();
    assert!(total(&ramp) < total(&exact));
    let fds: Vec<f64> = ramp.state.records.iter().map(|r| r.f_d).collect();
    assert!(fds.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*fds.last().unwrap(), 1.0);
}
