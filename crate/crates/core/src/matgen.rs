//! Synthetic material data from the nonlinear isotropic reference law
//! `σ = E(ε + αε³ + ½(tr ε + α (tr ε)³) I)`.
//!
//! `ε³` is the matrix cube of the symmetric strain tensor, which keeps the
//! law isotropic.

use nalgebra::{Matrix3, Matrix6};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phase::{map_point, MappedPoint, MetricC, PhaseState, VoigtVector, VOIGT};

/// Points per RNG substream when sampling a dataset.
pub const SAMPLE_CHUNK: usize = 1 << 16;

/// Strain sampling range used throughout the cube experiments.
pub const DEFAULT_BOUNDS: (f64, f64) = (-0.025, 0.025);

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaterialParams {
    /// Modulus-like scale, MPa.
    pub e: f64,
    pub alpha: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self { e: 1000.0, alpha: 500.0 }
    }
}

impl MaterialParams {
    pub fn new(e: f64, alpha: f64) -> Result<Self> {
        if !(e > 0.0 && e.is_finite()) || !alpha.is_finite() {
            return Err(Error::Contract(format!("invalid material parameters E={e}, alpha={alpha}")));
        }
        Ok(Self { e, alpha })
    }
}

/// Voigt strain (engineering shear) to the symmetric tensor.
pub fn strain_tensor(v: &VoigtVector) -> Matrix3<f64> {
    Matrix3::new(
        v[0],
        0.5 * v[3],
        0.5 * v[4],
        0.5 * v[3],
        v[1],
        0.5 * v[5],
        0.5 * v[4],
        0.5 * v[5],
        v[2],
    )
}

/// Symmetric stress tensor to Voigt (no shear factor).
pub fn stress_voigt(t: &Matrix3<f64>) -> VoigtVector {
    VoigtVector::new(t[(0, 0)], t[(1, 1)], t[(2, 2)], t[(0, 1)], t[(0, 2)], t[(1, 2)])
}

pub fn eval_material(strain: &VoigtVector, p: &MaterialParams) -> VoigtVector {
    let eps = strain_tensor(strain);
    let cube = eps * eps * eps;
    let tr = eps.trace();
    let vol = 0.5 * (tr + p.alpha * tr * tr * tr);
    let sigma = (eps + cube * p.alpha + Matrix3::identity() * vol) * p.e;
    stress_voigt(&sigma)
}

/// Consistent tangent `∂σ/∂ε` in Voigt form (engineering shear on the strain side).
pub fn material_tangent(strain: &VoigtVector, p: &MaterialParams) -> Matrix6<f64> {
    let eps = strain_tensor(strain);
    let eps2 = eps * eps;
    let tr = eps.trace();
    let dvol = 0.5 * (1.0 + 3.0 * p.alpha * tr * tr);
    let mut out = Matrix6::zeros();
    for j in 0..VOIGT {
        let mut unit = VoigtVector::zeros();
        unit[j] = 1.0;
        let h = strain_tensor(&unit);
        let dcube = h * eps2 + eps * h * eps + eps2 * h;
        let dsig = (h + dcube * p.alpha + Matrix3::identity() * (dvol * h.trace())) * p.e;
        out.set_column(j, &stress_voigt(&dsig));
    }
    out
}

/// Sampled material states plus, once a metric is bound, their mapped
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDataset {
    points: Vec<PhaseState>,
    mapped: Vec<MappedPoint>,
    metric: Option<MetricC>,
    pub seed: u64,
    pub bounds: (f64, f64),
}

impl MaterialDataset {
    pub fn from_points(points: Vec<PhaseState>, seed: u64, bounds: (f64, f64)) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Contract(format!("non-finite state at index {i}")));
        }
        Ok(Self { points, mapped: Vec::new(), metric: None, seed, bounds })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PhaseState] {
        &self.points
    }

    /// Maps every point with `metric`; replaces any earlier binding.
    pub fn bind_metric(&mut self, metric: MetricC) {
        self.mapped = self.points.par_iter().map(|p| map_point(p, &metric)).collect();
        self.metric = Some(metric);
    }

    pub fn metric(&self) -> Option<&MetricC> {
        self.metric.as_ref()
    }

    /// Mapped coordinates; empty until a metric is bound.
    pub fn mapped(&self) -> &[MappedPoint] {
        &self.mapped
    }

    pub fn is_bound(&self) -> bool {
        self.metric.is_some()
    }

    pub(crate) fn require_bound(&self) -> Result<&[MappedPoint]> {
        if self.metric.is_none() {
            return Err(Error::Contract("dataset has no bound metric".into()));
        }
        Ok(&self.mapped)
    }
}

/// Uniform double in `[0, 1)` from the top 53 bits of one 64-bit draw.
#[inline]
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// RNG for substream `stream` of a run seeded with `seed`. Every
/// reproducible random quantity in the crate is drawn from one of these.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` strains i.i.d. uniform per Voigt component from `bounds` and
/// evaluates the reference law on each.
///
/// Points `[c·SAMPLE_CHUNK, (c+1)·SAMPLE_CHUNK)` come from
/// `substream(seed, c)`, so the output does not depend on the thread count.
pub fn sample_dataset(n: usize, bounds: (f64, f64), p: &MaterialParams, seed: u64) -> Result<MaterialDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (lo, hi) = bounds;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Contract(format!("invalid bounds [{lo}, {hi}]")));
    }
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let points: Vec<PhaseState> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = substream(seed, c as u64);
            let len = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
            (0..len)
                .map(|_| {
                    let mut strain = VoigtVector::zeros();
                    for v in strain.iter_mut() {
                        *v = lo + (hi - lo) * unit_f64(&mut rng);
                    }
                    PhaseState::new(strain, eval_material(&strain, p))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    MaterialDataset::from_points(points, seed, bounds)
}
