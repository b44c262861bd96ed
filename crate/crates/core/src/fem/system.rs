use std::time::{Duration, Instant};

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Side};
use nalgebra::{Matrix6, SMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::bcs::BoundaryConditions;
use crate::fem::mesh::{Mesh, DOFS_PER_ELEMENT, GAUSS_PER_ELEMENT};
use crate::phase::{MetricC, PhaseState, VoigtVector};

pub type ElementMatrix = SMatrix<f64, DOFS_PER_ELEMENT, DOFS_PER_ELEMENT>;

/// Relative residual accepted from the linear solves.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Compressed sparse rows; duplicates summed on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut t: Vec<(usize, usize, f64)>) -> Csr {
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; n_rows + 1];
        let mut indices = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Csr { n_rows, n_cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| (self.indptr[r]..self.indptr[r + 1]).map(|k| self.values[k] * x[self.indices[k]]).sum())
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.indices[self.indptr[r]..self.indptr[r + 1]];
        row.binary_search(&c).map(|k| self.values[self.indptr[r] + k]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                d[r][self.indices[k]] = self.values[k];
            }
        }
        d
    }

    fn triplets(&self) -> Vec<Triplet<usize, usize, f64>> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.push(Triplet::new(r, self.indices[k], self.values[k]));
            }
        }
        out
    }
}

/// `Σ_q w_q Bᵀ D_q B` over the element's Gauss points.
pub fn element_matrix(mesh: &Mesh, e: usize, tangent: impl Fn(usize) -> Matrix6<f64>) -> ElementMatrix {
    let mut ke = ElementMatrix::zeros();
    for p in GAUSS_PER_ELEMENT * e..GAUSS_PER_ELEMENT * (e + 1) {
        let g = &mesh.gauss[p];
        let d = tangent(p);
        ke += g.b.transpose() * (d * g.b) * g.weight;
    }
    ke
}

/// Reduced blocks `K_ff` (free × free) and `K_fc` (free × constrained) of
/// the assembled operator. Element matrices are built in parallel and
/// scattered in element order.
pub fn assemble_blocks(
    mesh: &Mesh,
    bcs: &BoundaryConditions,
    tangent: impl Fn(usize) -> Matrix6<f64> + Sync,
) -> (Csr, Csr, Vec<usize>) {
    let constrained = constrained_dofs(bcs);
    let mut c_slot = vec![usize::MAX; bcs.n_dofs()];
    for (i, &d) in constrained.iter().enumerate() {
        c_slot[d] = i;
    }
    let kes: Vec<ElementMatrix> =
        (0..mesh.elements.len()).into_par_iter().map(|e| element_matrix(mesh, e, &tangent)).collect();
    let mut ff = Vec::with_capacity(kes.len() * DOFS_PER_ELEMENT * DOFS_PER_ELEMENT);
    let mut fc = Vec::new();
    for (e, ke) in kes.iter().enumerate() {
        let dofs = mesh.element_dofs(e);
        for (a, &da) in dofs.iter().enumerate() {
            let Some(ra) = bcs.free_slot(da) else { continue };
            for (b, &db) in dofs.iter().enumerate() {
                match bcs.free_slot(db) {
                    Some(rb) => ff.push((ra, rb, ke[(a, b)])),
                    None => fc.push((ra, c_slot[db], ke[(a, b)])),
                }
            }
        }
    }
    let nf = bcs.n_free();
    (Csr::from_triplets(nf, nf, ff), Csr::from_triplets(nf, constrained.len(), fc), constrained)
}

fn constrained_dofs(bcs: &BoundaryConditions) -> Vec<usize> {
    (0..bcs.n_dofs()).filter(|&d| bcs.free_slot(d).is_none()).collect()
}

/// `Σ_p w_p Bᵀ v_p` scattered into a full-length dof vector.
pub fn assemble_vector(mesh: &Mesh, v: impl Fn(usize) -> VoigtVector) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_dofs()];
    for (p, g) in mesh.gauss.iter().enumerate() {
        let fe = g.b.transpose() * v(p) * g.weight;
        for (i, d) in mesh.element_dofs(g.element).into_iter().enumerate() {
            out[d] += fe[i];
        }
    }
    out
}

/// Sparse SPD factorization of a `Csr` matrix.
pub struct SpdFactor {
    llt: Llt<usize, f64>,
    n: usize,
}

impl SpdFactor {
    pub fn new(k: &Csr) -> Result<Self> {
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(k.n_rows, k.n_cols, &k.triplets())
            .map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
        let llt = mat
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::SingularSystem(format!("Cholesky factorization failed: {e:?}")))?;
        Ok(Self { llt, n: k.n_rows })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = Col::<f64>::from_fn(self.n, |i| rhs[i]);
        let x = self.llt.solve(&b);
        (0..self.n).map(|i| x[i]).collect()
    }
}

/// Solves `K x = rhs` and checks the residual.
pub fn checked_solve(k: &Csr, factor: &SpdFactor, rhs: &[f64], what: &str) -> Result<Vec<f64>> {
    if k.n_rows == 0 {
        return Ok(Vec::new());
    }
    let x = factor.solve(rhs);
    let kx = k.matvec(&x);
    let res = kx.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(res <= SOLVE_TOLERANCE * scale) && !(scale == 0.0 && res == 0.0) {
        return Err(Error::Convergence(format!("{what}: residual {res:e} exceeds {SOLVE_TOLERANCE:e}·{scale:e}")));
    }
    Ok(x)
}

/// The boundary-reduced operator `K = A{w Bᵀ C B}`, factorized once and
/// shared by both constraint solves of every iteration.
pub struct SystemMatrices {
    pub k_ff: Csr,
    pub k_fc: Csr,
    constrained: Vec<usize>,
    factor: SpdFactor,
    metric: MetricC,
}

/// Output of the constraint-set projection.
#[derive(Debug, Clone)]
pub struct Projection {
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
    pub states: Vec<PhaseState>,
    /// Time spent assembling the right-hand sides.
    pub t_rhs: Duration,
    /// Time spent in the two solves and the state recovery.
    pub t_solve: Duration,
}

pub fn assemble_k(mesh: &Mesh, bcs: &BoundaryConditions, metric: &MetricC) -> Result<SystemMatrices> {
    let c = *metric.matrix();
    let (k_ff, k_fc, constrained) = assemble_blocks(mesh, bcs, |_| c);
    let factor = SpdFactor::new(&k_ff)?;
    Ok(SystemMatrices { k_ff, k_fc, constrained, factor, metric: metric.clone() })
}

impl SystemMatrices {
    pub fn metric(&self) -> &MetricC {
        &self.metric
    }

    pub fn n_free(&self) -> usize {
        self.k_ff.n_rows
    }

    /// Solves with the shared factor.
    pub fn solve(&self, rhs: &[f64], what: &str) -> Result<Vec<f64>> {
        checked_solve(&self.k_ff, &self.factor, rhs, what)
    }

    /// Projects assigned data states onto the constraint set.
    ///
    /// Solves `K u = E` (constrained dofs eliminated with a right-hand-side
    /// correction) and `K η = S` (homogeneous on constrained dofs), then
    /// recovers `ε = B u` and `σ = σ* + C B η` at every integration point.
    /// `f` holds nodal forces over all dofs; `None` means zero.
    pub fn project_constraint(
        &self,
        mesh: &Mesh,
        bcs: &BoundaryConditions,
        assigned: &[PhaseState],
        f: Option<&[f64]>,
    ) -> Result<Projection> {
        let m = mesh.n_points();
        if assigned.len() != m {
            return Err(Error::Contract(format!("{} assigned states for {m} integration points", assigned.len())));
        }
        if f.is_some_and(|f| f.len() != mesh.n_dofs()) {
            return Err(Error::Contract("nodal force vector has wrong length".into()));
        }
        let start = Instant::now();
        let c = *self.metric.matrix();
        let e_full = assemble_vector(mesh, |p| c * assigned[p].strain);
        let s_int = assemble_vector(mesh, |p| assigned[p].stress);

        let u_c: Vec<f64> = {
            let full = bcs.constrained_values();
            self.constrained.iter().map(|&d| full[d]).collect()
        };
        let correction = self.k_fc.matvec(&u_c);
        let rhs_u: Vec<f64> = bcs.free.iter().zip(&correction).map(|(&d, corr)| e_full[d] - corr).collect();
        let rhs_eta: Vec<f64> =
            bcs.free.iter().map(|&d| f.map_or(0.0, |f| f[d]) - s_int[d]).collect();

        let t_rhs = start.elapsed();
        let start = Instant::now();
        let u_f = self.solve(&rhs_u, "K u = E")?;
        let eta_f = self.solve(&rhs_eta, "K eta = S")?;

        let mut u = bcs.constrained_values();
        let mut eta = vec![0.0; mesh.n_dofs()];
        for (i, &d) in bcs.free.iter().enumerate() {
            u[d] = u_f[i];
            eta[d] = eta_f[i];
        }
        let states = (0..m)
            .into_par_iter()
            .map(|p| {
                let strain = mesh.strain_at(p, &u);
                let stress = assigned[p].stress + c * mesh.strain_at(p, &eta);
                PhaseState::new(strain, stress)
            })
            .collect();
        Ok(Projection { u, eta, states, t_rhs, t_solve: start.elapsed() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::bcs::twist_bcs;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd_metric(seed: u64) -> MetricC {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        MetricC::new((a * a.transpose() + Matrix6::identity()) * 500.0).unwrap()
    }

    /// Dense oracle: full K from explicit loops over Gauss points.
    fn dense_full_k(mesh: &Mesh, c: &Matrix6<f64>) -> DMatrix<f64> {
        let n = mesh.n_dofs();
        let mut k = DMatrix::zeros(n, n);
        for g in &mesh.gauss {
            let dofs = mesh.element_dofs(g.element);
            for a in 0..DOFS_PER_ELEMENT {
                for b in 0..DOFS_PER_ELEMENT {
                    let mut v = 0.0;
                    for i in 0..6 {
                        for j in 0..6 {
                            v += g.b[(i, a)] * c[(i, j)] * g.b[(j, b)];
                        }
                    }
                    k[(dofs[a], dofs[b])] += g.weight * v;
                }
            }
        }
        k
    }

    #[test]
    fn one_element_matches_dense_assembly() {
        let mesh = Mesh::build(10.0, 1).unwrap();
        let bcs = twist_bcs(&mesh, 0.0).unwrap();
        // Twist BCs constrain every node of a one-element mesh; use a lighter set.
        let bcs_light = BoundaryConditions::new(mesh.n_dofs(), vec![0, 1, 2, 4, 5, 11], vec![]).unwrap();
        assert_eq!(bcs.n_free(), 0);
        let metric = MetricC::identity();
        let sys = assemble_k(&mesh, &bcs_light, &metric).unwrap();
        let full = dense_full_k(&mesh, metric.matrix());
        let kd = sys.k_ff.to_dense();
        let scale = full.amax();
        for (i, &di) in bcs_light.free.iter().enumerate() {
            for (j, &dj) in bcs_light.free.iter().enumerate() {
                assert!((kd[i][j] - full[(di, dj)]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn unreduced_k_annihilates_rigid_translation_and_is_symmetric() {
        let mesh = Mesh::build(10.0, 2).unwrap();
        let none = BoundaryConditions::new(mesh.n_dofs(), vec![], vec![]).unwrap();
        let metric = spd_metric(1);
        let c = *metric.matrix();
        let (k, _, _) = assemble_blocks(&mesh, &none, |_| c);
        let scale = k.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for dir in 0..3 {
            let u: Vec<f64> = (0..mesh.n_dofs()).map(|d| if d % 3 == dir { 1.0 } else { 0.0 }).collect();
            let ku = k.matvec(&u);
            assert!(ku.iter().all(|v| v.abs() <= 1e-10 * scale));
        }
        for r in 0..k.n_rows {
            for idx in k.indptr[r]..k.indptr[r + 1] {
                let c = k.indices[idx];
                assert!((k.values[idx] - k.get(c, r)).abs() <= 1e-12 * scale);
            }
        }
    }

    /// Dense oracle for the constraint projection: the same equations solved
    /// with a dense LU on the unreduced system with constraints substituted.
    #[test]
    fn projection_matches_dense_solve() {
        let mesh = Mesh::build(10.0, 1).unwrap();
        let bcs = BoundaryConditions::new(mesh.n_dofs(), vec![0, 1, 2, 4, 5, 11], vec![(20, 0.01), (23, -0.02)]).unwrap();
        let metric = spd_metric(2);
        let c = *metric.matrix();
        let sys = assemble_k(&mesh, &bcs, &metric).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let assigned: Vec<PhaseState> = (0..mesh.n_points())
            .map(|_| {
                PhaseState::new(
                    VoigtVector::from_fn(|_, _| rng.gen_range(-0.02..0.02)),
                    VoigtVector::from_fn(|_, _| rng.gen_range(-50.0..50.0)),
                )
            })
            .collect();
        let f: Vec<f64> = (0..mesh.n_dofs()).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let proj = sys.project_constraint(&mesh, &bcs, &assigned, Some(&f)).unwrap();

        let n = mesh.n_dofs();
        let full = dense_full_k(&mesh, &c);
        let mut e = DVector::zeros(n);
        let mut s = DVector::from_column_slice(&f);
        for (p, g) in mesh.gauss.iter().enumerate() {
            let dofs = mesh.element_dofs(g.element);
            let fe = g.b.transpose() * (c * assigned[p].strain) * g.weight;
            let se = g.b.transpose() * assigned[p].stress * g.weight;
            for i in 0..DOFS_PER_ELEMENT {
                e[dofs[i]] += fe[i];
                s[dofs[i]] -= se[i];
            }
        }
        let solve = |rhs: &DVector<f64>, values: &[f64]| {
            let mut a = full.clone();
            let mut b = rhs.clone();
            for d in 0..n {
                if bcs.free_slot(d).is_none() {
                    for j in 0..n {
                        a[(d, j)] = 0.0;
                    }
                    a[(d, d)] = 1.0;
                    b[d] = values[d];
                }
            }
            a.lu().solve(&b).unwrap()
        };
        let u = solve(&e, &bcs.constrained_values());
        let eta = solve(&s, &vec![0.0; n]);
        for d in 0..n {
            assert!((u[d] - proj.u[d]).abs() <= 1e-10 * u.amax());
            assert!((eta[d] - proj.eta[d]).abs() <= 1e-10 * eta.amax());
        }
    }

    #[test]
    fn zero_inputs_give_zero_projection() {
        let mesh = Mesh::build(10.0, 2).unwrap();
        let bcs = twist_bcs(&mesh, 0.0).unwrap();
        let sys = assemble_k(&mesh, &bcs, &spd_metric(4)).unwrap();
        let proj = sys.project_constraint(&mesh, &bcs, &vec![PhaseState::zero(); mesh.n_points()], None).unwrap();
        assert!(proj.u.iter().chain(&proj.eta).all(|&v| v == 0.0));
        assert!(proj.states.iter().all(|s| *s == PhaseState::zero()));
    }

    #[test]
    fn projection_is_idempotent_on_the_constraint_set() {
        let mesh = Mesh::build(10.0, 3).unwrap();
        let bcs = twist_bcs(&mesh, 2.0).unwrap();
        let sys = assemble_k(&mesh, &bcs, &spd_metric(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let arbitrary: Vec<PhaseState> = (0..mesh.n_points())
            .map(|_| {
                PhaseState::new(
                    VoigtVector::from_fn(|_, _| rng.gen_range(-0.02..0.02)),
                    VoigtVector::from_fn(|_, _| rng.gen_range(-50.0..50.0)),
                )
            })
            .collect();
        let first = sys.project_constraint(&mesh, &bcs, &arbitrary, None).unwrap();
        let second = sys.project_constraint(&mesh, &bcs, &first.states, None).unwrap();
        for (a, b) in first.states.iter().zip(&second.states) {
            assert!((a.strain - b.strain).amax() <= 1e-9 * (1.0 + a.strain.amax()));
            assert!((a.stress - b.stress).amax() <= 1e-9 * (1.0 + a.stress.amax()));
        }
    }

    #[test]
    fn reduced_k_is_positive_definite() {
        let mesh = Mesh::build(10.0, 2).unwrap();
        let bcs = twist_bcs(&mesh, 2.0).unwrap();
        let sys = assemble_k(&mesh, &bcs, &spd_metric(7)).unwrap();
        let n = sys.n_free();
        let dense = DMatrix::from_fn(n, n, |i, j| sys.k_ff.get(i, j));
        assert!(dense.clone().cholesky().is_some());
    }

    #[test]
    fn wrong_lengths_are_contract_errors() {
        let mesh = Mesh::build(10.0, 1).unwrap();
        let bcs = BoundaryConditions::new(mesh.n_dofs(), vec![0, 1, 2, 4, 5, 11], vec![]).unwrap();
        let sys = assemble_k(&mesh, &bcs, &MetricC::identity()).unwrap();
        assert!(matches!(
            sys.project_constraint(&mesh, &bcs, &[PhaseState::zero()], None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unsupported_structure_is_singular() {
        let mesh = Mesh::build(10.0, 1).unwrap();
        let none = BoundaryConditions::new(mesh.n_dofs(), vec![], vec![]).unwrap();
        assert!(matches!(assemble_k(&mesh, &none, &MetricC::identity()), Err(Error::SingularSystem(_))));
    }
}
