//! Local phase space: strain/stress pairs, the metric that weighs them, and
//! the isometric mapping into plain Euclidean coordinates.
//!
//! Voigt order is `(11, 22, 33, 12, 13, 23)`. Strains carry engineering
//! shear (`γ = 2ε_ij`), and the metric acts on raw Voigt vectors with the
//! ordinary dot product.

use nalgebra::{Matrix6, SMatrix, SymmetricEigen, Vector6};

use crate::error::{Error, Result};

/// Number of Voigt components of a symmetric 3x3 tensor.
pub const VOIGT: usize = 6;
/// Dimension of the local phase space (strain and stress).
pub const PHASE_DIM: usize = 2 * VOIGT;

pub type VoigtVector = Vector6<f64>;

/// A (strain, stress) state at one material point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseState {
    pub strain: VoigtVector,
    pub stress: VoigtVector,
}

impl PhaseState {
    pub fn new(strain: VoigtVector, stress: VoigtVector) -> Self {
        Self { strain, stress }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.strain.iter().chain(self.stress.iter()).all(|v| v.is_finite())
    }

    /// Concatenated `(strain ‖ stress)` coordinates.
    pub fn to_array(&self) -> [f64; PHASE_DIM] {
        let mut out = [0.0; PHASE_DIM];
        out[..VOIGT].copy_from_slice(self.strain.as_slice());
        out[VOIGT..].copy_from_slice(self.stress.as_slice());
        out
    }

    pub fn from_array(a: &[f64; PHASE_DIM]) -> Self {
        Self {
            strain: VoigtVector::from_column_slice(&a[..VOIGT]),
            stress: VoigtVector::from_column_slice(&a[VOIGT..]),
        }
    }
}

/// A phase state expressed in coordinates where the local distance is the
/// squared Euclidean norm: `(Lᵀε ‖ L⁻¹σ)` with `C = L·Lᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappedPoint(pub [f64; PHASE_DIM]);

impl MappedPoint {
    pub const ZERO: MappedPoint = MappedPoint([0.0; PHASE_DIM]);

    #[inline]
    pub fn coords(&self) -> &[f64; PHASE_DIM] {
        &self.0
    }

    #[inline]
    pub fn dist_sq(&self, other: &MappedPoint) -> f64 {
        sq_dist(&self.0, &other.0)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64; PHASE_DIM], b: &[f64; PHASE_DIM]) -> f64 {
    let mut acc = 0.0;
    for i in 0..PHASE_DIM {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Symmetric positive definite 6x6 metric weighting strain against stress.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricC {
    matrix: Matrix6<f64>,
    inverse: Matrix6<f64>,
    factor: Matrix6<f64>,
    inverse_factor: Matrix6<f64>,
}

impl MetricC {
    /// Validates symmetry (1e-12 relative) and positive definiteness, then
    /// caches the Cholesky factor and its inverse.
    pub fn new(matrix: Matrix6<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::MetricConstruction("non-finite entry".into()));
        }
        let scale = matrix.amax();
        if scale == 0.0 {
            return Err(Error::MetricConstruction("zero matrix".into()));
        }
        let asym = (matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::MetricConstruction(format!(
                "matrix not symmetric (max asymmetry {asym:e})"
            )));
        }
        let chol = matrix
            .cholesky()
            .ok_or_else(|| Error::MetricConstruction("matrix not positive definite".into()))?;
        let factor = chol.l();
        if (0..VOIGT).any(|i| factor[(i, i)] <= 0.0) {
            return Err(Error::MetricConstruction("non-positive Cholesky pivot".into()));
        }
        let inverse_factor = factor
            .try_inverse()
            .ok_or_else(|| Error::MetricConstruction("singular Cholesky factor".into()))?;
        let inverse = chol.inverse();
        Ok(Self { matrix, inverse, factor, inverse_factor })
    }

    pub fn identity() -> Self {
        Self::scaled_identity(1.0)
    }

    /// `scale · I`; also the fallback when PCA construction fails.
    pub fn scaled_identity(scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "metric scale must be positive");
        let s = scale.sqrt();
        Self {
            matrix: Matrix6::identity() * scale,
            inverse: Matrix6::identity() / scale,
            factor: Matrix6::identity() * s,
            inverse_factor: Matrix6::identity() / s,
        }
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix6<f64> {
        &self.inverse
    }

    /// Lower-triangular `L` with `C = L·Lᵀ`.
    pub fn factor(&self) -> &Matrix6<f64> {
        &self.factor
    }

    pub fn inverse_factor(&self) -> &Matrix6<f64> {
        &self.inverse_factor
    }
}

/// `C·Δε·Δε + C⁻¹·Δσ·Δσ`.
pub fn local_distance_sq(a: &PhaseState, b: &PhaseState, c: &MetricC) -> f64 {
    let de = a.strain - b.strain;
    let ds = a.stress - b.stress;
    (c.matrix * de).dot(&de) + (c.inverse * ds).dot(&ds)
}

pub fn map_point(s: &PhaseState, c: &MetricC) -> MappedPoint {
    let e = c.factor.transpose() * s.strain;
    let t = c.inverse_factor * s.stress;
    let mut out = [0.0; PHASE_DIM];
    out[..VOIGT].copy_from_slice(e.as_slice());
    out[VOIGT..].copy_from_slice(t.as_slice());
    MappedPoint(out)
}

/// Inverse of [`map_point`].
pub fn unmap_point(p: &MappedPoint, c: &MetricC) -> PhaseState {
    let e = VoigtVector::from_column_slice(&p.0[..VOIGT]);
    let t = VoigtVector::from_column_slice(&p.0[VOIGT..]);
    let strain = c.inverse_factor.transpose() * e;
    let stress = c.factor * t;
    PhaseState { strain, stress }
}

/// `Σ_e ½ w_e d_e²(y_e, z_e)`.
///
/// `metrics` holds either one metric per point or a single metric shared by
/// all of them.
pub fn global_distance_sq(
    y: &[PhaseState],
    z: &[PhaseState],
    weights: &[f64],
    metrics: &[MetricC],
) -> Result<f64> {
    let m = y.len();
    if z.len() != m || weights.len() != m {
        return Err(Error::Contract(format!(
            "length mismatch: {} states, {} data states, {} weights",
            m,
            z.len(),
            weights.len()
        )));
    }
    if metrics.len() != m && metrics.len() != 1 {
        return Err(Error::Contract(format!(
            "expected 1 or {m} metrics, got {}",
            metrics.len()
        )));
    }
    let mut total = 0.0;
    for e in 0..m {
        let c = if metrics.len() == 1 { &metrics[0] } else { &metrics[e] };
        total += 0.5 * weights[e] * local_distance_sq(&y[e], &z[e], c);
    }
    Ok(total)
}

/// `(M + Mᵀ) / 2`, exactly symmetric.
pub fn sym(m: &Matrix6<f64>) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    for i in 0..VOIGT {
        for j in i..VOIGT {
            let v = (m[(i, j)] + m[(j, i)]) / 2.0;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

const PCA_MAX_CONDITION: f64 = 1e12;

/// Metric from the leading principal subspace of the data.
///
/// The first six principal directions of the centered 12-d data form the
/// columns of `A`; its strain rows `A_ε` and stress rows `A_σ` describe the
/// subspace as a linear map `ε ↦ A_σ·A_ε⁻¹·ε`, whose symmetric part is the
/// metric. For data on a linear law `σ = D·ε` this returns `D`.
pub fn pca_metric(data: &[PhaseState]) -> Result<MetricC> {
    let n = data.len();
    if n < PHASE_DIM {
        return Err(Error::MetricConstruction(format!(
            "need at least {PHASE_DIM} points, got {n}"
        )));
    }
    let mut mean = [0.0; PHASE_DIM];
    for s in data {
        for (acc, v) in mean.iter_mut().zip(s.to_array()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = SMatrix::<f64, PHASE_DIM, PHASE_DIM>::zeros();
    for s in data {
        let a = s.to_array();
        let mut d = [0.0; PHASE_DIM];
        for i in 0..PHASE_DIM {
            d[i] = a[i] - mean[i];
        }
        for i in 0..PHASE_DIM {
            for j in i..PHASE_DIM {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..PHASE_DIM {
        for j in i..PHASE_DIM {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..PHASE_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut a_eps = Matrix6::<f64>::zeros();
    let mut a_sig = Matrix6::<f64>::zeros();
    for (col, &k) in order.iter().take(VOIGT).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..VOIGT {
            a_eps[(r, col)] = sign * v[r];
            a_sig[(r, col)] = sign * v[VOIGT + r];
        }
    }

    let sv = a_eps.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > PCA_MAX_CONDITION {
        return Err(Error::MetricConstruction(format!(
            "strain block of principal directions is singular (condition {:e})",
            smax / smin
        )));
    }
    let a_eps_inv = a_eps
        .try_inverse()
        .ok_or_else(|| Error::MetricConstruction("strain block not invertible".into()))?;
    MetricC::new(sym(&(a_sig * a_eps_inv)))
}

/// [`pca_metric`], falling back to `fallback_scale · I` when it fails.
pub fn pca_metric_or_fallback(data: &[PhaseState], fallback_scale: f64) -> MetricC {
    pca_metric(data).unwrap_or_else(|_| MetricC::scaled_identity(fallback_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng) -> Matrix6<f64> {
        let mut a = Matrix6::<f64>::zeros();
        for v in a.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let scale = 10f64.powf(rng.gen_range(-1.0..3.0));
        (a * a.transpose() + Matrix6::identity() * 0.5) * scale
    }

    fn random_state(rng: &mut impl Rng) -> PhaseState {
        let mut s = PhaseState::zero();
        for i in 0..VOIGT {
            s.strain[i] = rng.gen_range(-0.03..0.03);
            s.stress[i] = rng.gen_range(-100.0..100.0);
        }
        s
    }

    /// Independent evaluation: explicit dense inverse, no factor.
    fn direct_distance(a: &PhaseState, b: &PhaseState, c: &Matrix6<f64>) -> f64 {
        let de = a.strain - b.strain;
        let ds = a.stress - b.stress;
        let cinv = c.try_inverse().unwrap();
        (de.transpose() * c * de)[0] + (ds.transpose() * cinv * ds)[0]
    }

    #[test]
    fn coincident_states_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = MetricC::new(random_spd(&mut rng)).unwrap();
        let a = random_state(&mut rng);
        assert_eq!(local_distance_sq(&a, &a, &c), 0.0);
    }

    #[test]
    fn hand_evaluated_distance() {
        let c = MetricC::scaled_identity(1000.0);
        let a = PhaseState::zero();
        let mut b = PhaseState::zero();
        b.strain[0] = 0.01;
        b.stress[0] = 1.0;
        let d = local_distance_sq(&a, &b, &c);
        assert!((d - 0.101).abs() <= 1e-15 * 0.101, "{d}");
    }

    #[test]
    fn isometry_over_random_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let cm = random_spd(&mut rng);
            let c = MetricC::new(cm).unwrap();
            for _ in 0..1000 {
                let a = random_state(&mut rng);
                let b = random_state(&mut rng);
                let direct = direct_distance(&a, &b, &cm);
                let mapped = map_point(&a, &c).dist_sq(&map_point(&b, &c));
                assert!((direct - mapped).abs() <= 1e-10 * direct, "{direct} vs {mapped}");
                let via_op = local_distance_sq(&a, &b, &c);
                assert!((direct - via_op).abs() <= 1e-10 * direct);
            }
        }
    }

    #[test]
    fn map_point_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng);
        assert_eq!(map_point(&s, &MetricC::identity()).0, s.to_array());
        let c = MetricC::new(random_spd(&mut rng)).unwrap();
        assert_eq!(map_point(&PhaseState::zero(), &c), MappedPoint::ZERO);
    }

    #[test]
    fn map_point_diagonal_metric() {
        let mut m = Matrix6::identity();
        m[(0, 0)] = 4.0;
        let c = MetricC::new(m).unwrap();
        let mut s = PhaseState::zero();
        s.strain[0] = 1.0;
        s.stress[0] = 2.0;
        let p = map_point(&s, &c);
        assert!((p.0[0] - 2.0).abs() < 1e-15);
        assert!((p.0[6] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unmap_inverts_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = MetricC::new(random_spd(&mut rng)).unwrap();
        let s = random_state(&mut rng);
        let back = unmap_point(&map_point(&s, &c), &c);
        for i in 0..VOIGT {
            assert!((back.strain[i] - s.strain[i]).abs() < 1e-12);
            assert!((back.stress[i] - s.stress[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_rejects_bad_matrices() {
        let mut m = Matrix6::identity();
        m[(0, 1)] = 0.5;
        assert!(matches!(MetricC::new(m), Err(Error::MetricConstruction(_))));
        let mut m = Matrix6::identity();
        m[(3, 3)] = -1.0;
        assert!(matches!(MetricC::new(m), Err(Error::MetricConstruction(_))));
    }

    #[test]
    fn factor_reproduces_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_spd(&mut rng);
        let c = MetricC::new(m).unwrap();
        let back = c.factor() * c.factor().transpose();
        assert!((back - m).amax() <= 1e-10 * m.amax());
    }

    #[test]
    fn global_distance_examples() {
        let c = MetricC::scaled_identity(1000.0);
        let a = PhaseState::zero();
        let mut b = PhaseState::zero();
        b.strain[0] = 0.01;
        b.stress[0] = 1.0;
        let g = global_distance_sq(&[a], &[b], &[2.0], std::slice::from_ref(&c)).unwrap();
        assert!((g - 0.101).abs() < 1e-15);

        let g0 = global_distance_sq(&[a, b], &[a, b], &[1.0, 3.0], std::slice::from_ref(&c)).unwrap();
        assert_eq!(g0, 0.0);

        let g1 = global_distance_sq(&[a, a], &[b, b], &[1.0, 3.0], std::slice::from_ref(&c)).unwrap();
        let g2 = global_distance_sq(&[a, a], &[b, b], &[2.0, 6.0], std::slice::from_ref(&c)).unwrap();
        assert!((g2 - 2.0 * g1).abs() < 1e-15 * g2);

        let err = global_distance_sq(&[a], &[a, b], &[1.0], &[c]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sym_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Matrix6::<f64>::zeros();
        for v in m.iter_mut() {
            *v = rng.gen_range(-1e3..1e3);
        }
        let s = sym(&m);
        assert_eq!(s, s.transpose());
    }

    fn linear_law_data(d: &Matrix6<f64>, n: usize, seed: u64) -> Vec<PhaseState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut e = VoigtVector::zeros();
                for v in e.iter_mut() {
                    *v = rng.gen_range(-0.025..0.025);
                }
                PhaseState::new(e, d * e)
            })
            .collect()
    }

    #[test]
    fn pca_recovers_linear_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_spd(&mut rng);
        let data = linear_law_data(&d, 2000, 8);
        let c = pca_metric(&data).unwrap();
        let rel = (c.matrix() - d).amax() / d.amax();
        assert!(rel <= 1e-6, "relative error {rel:e}");
    }

    #[test]
    fn pca_identity_law() {
        let data = linear_law_data(&Matrix6::identity(), 500, 9);
        let c = pca_metric(&data).unwrap();
        assert!((c.matrix() - Matrix6::identity()).amax() <= 1e-6);
    }

    #[test]
    fn pca_invariant_under_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut data: Vec<PhaseState> = (0..400)
            .map(|_| {
                let s = random_state(&mut rng);
                let mut t = s;
                t.stress = s.strain * 1000.0 + s.stress * 0.01;
                t
            })
            .collect();
        let c1 = pca_metric(&data).unwrap();
        data.reverse();
        data.swap(3, 200);
        let c2 = pca_metric(&data).unwrap();
        assert!((c1.matrix() - c2.matrix()).amax() <= 1e-8 * c1.matrix().amax());
    }

    #[test]
    fn pca_rejects_degenerate_strain_block() {
        // Strain constant: the principal subspace carries no strain information.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<PhaseState> = (0..100)
            .map(|_| {
                let mut s = PhaseState::zero();
                for i in 0..VOIGT {
                    s.stress[i] = rng.gen_range(-1.0..1.0);
                }
                s
            })
            .collect();
        assert!(matches!(pca_metric(&data), Err(Error::MetricConstruction(_))));
        let fb = pca_metric_or_fallback(&data, 1000.0);
        assert_eq!(*fb.matrix(), Matrix6::identity() * 1000.0);
        assert!(pca_metric(&data[..5]).is_err());
    }

    proptest! {
        #[test]
        fn mapped_space_is_a_metric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = MetricC::new(random_spd(&mut rng)).unwrap();
            let [a, b, x] = [0; 3].map(|_| map_point(&random_state(&mut rng), &c));
            let ab = a.dist_sq(&b).sqrt();
            let bx = b.dist_sq(&x).sqrt();
            let ax = a.dist_sq(&x).sqrt();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(a.dist_sq(&b), b.dist_sq(&a));
            prop_assert!(ax <= ab + bx + 1e-9 * (ab + bx));
        }
    }
}
