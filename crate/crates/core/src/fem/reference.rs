//! Newton–Raphson solution of the cube problem with the true material law,
//! used as the model-based reference for data-driven runs.

use crate::error::{Error, Result};
use crate::fem::bcs::BoundaryConditions;
use crate::fem::mesh::Mesh;
use crate::fem::system::{assemble_blocks, assemble_vector, checked_solve, SpdFactor};
use crate::matgen::{eval_material, material_tangent, MaterialParams};
use crate::phase::PhaseState;

pub const NEWTON_TOLERANCE: f64 = 1e-8;
pub const NEWTON_MAX_STEPS: usize = 50;

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    /// Nodal displacements over all dofs.
    pub u: Vec<f64>,
    /// Newton updates performed.
    pub steps: usize,
    pub relative_residual: f64,
}

fn free_norm(v: &[f64], bcs: &BoundaryConditions) -> f64 {
    bcs.free.iter().map(|&d| v[d] * v[d]).sum::<f64>().sqrt()
}

/// Converged once the free-dof residual is at most `NEWTON_TOLERANCE`
/// times the norm of the internal force vector (reactions included).
pub fn reference_solution(
    mesh: &Mesh,
    bcs: &BoundaryConditions,
    p: &MaterialParams,
    f: Option<&[f64]>,
) -> Result<ReferenceSolution> {
    let mut u = bcs.constrained_values();
    let mut steps = 0;
    loop {
        let strains = mesh.strains(&u);
        let internal = assemble_vector(mesh, |q| eval_material(&strains[q], p));
        let residual: Vec<f64> = (0..mesh.n_dofs())
            .map(|d| internal[d] - f.map_or(0.0, |f| f[d]))
            .collect();
        let r = free_norm(&residual, bcs);
        let scale = internal
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f.map_or(0.0, |f| free_norm(f, bcs)));
        let rel = if scale > 0.0 { r / scale } else { r };
        if r == 0.0 || rel <= NEWTON_TOLERANCE {
            return Ok(ReferenceSolution { u, steps, relative_residual: rel });
        }
        if steps == NEWTON_MAX_STEPS {
            return Err(Error::Convergence(format!(
                "Newton did not converge in {NEWTON_MAX_STEPS} steps (relative residual {rel:e})"
            )));
        }
        let (k_ff, _, _) = assemble_blocks(mesh, bcs, |q| material_tangent(&strains[q], p));
        let factor = SpdFactor::new(&k_ff)?;
        let rhs: Vec<f64> = bcs.free.iter().map(|&d| -residual[d]).collect();
        let du = checked_solve(&k_ff, &factor, &rhs, "Newton update")?;
        for (i, &d) in bcs.free.iter().enumerate() {
            u[d] += du[i];
        }
        steps += 1;
    }
}

/// `(ε, σ(ε))` at every integration point for displacements `u`.
pub fn reference_states(mesh: &Mesh, u: &[f64], p: &MaterialParams) -> Vec<PhaseState> {
    mesh.strains(u).into_iter().map(|e| PhaseState::new(e, eval_material(&e, p))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::bcs::twist_bcs;

    #[test]
    fn no_load_gives_zero_displacement() {
        let mesh = Mesh::build(10.0, 2).unwrap();
        let bcs = twist_bcs(&mesh, 0.0).unwrap();
        let sol = reference_solution(&mesh, &bcs, &MaterialParams::default(), None).unwrap();
        assert_eq!(sol.steps, 0);
        assert!(sol.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_material_needs_one_step() {
        let mesh = Mesh::build(10.0, 3).unwrap();
        let bcs = twist_bcs(&mesh, 2.0).unwrap();
        let sol = reference_solution(&mesh, &bcs, &MaterialParams::new(1000.0, 0.0).unwrap(), None).unwrap();
        assert_eq!(sol.steps, 1);
    }

    #[test]
    fn nonlinear_twist_converges_and_is_equilibrated() {
        let mesh = Mesh::build(10.0, 3).unwrap();
        let bcs = twist_bcs(&mesh, 2.0).unwrap();
        let p = MaterialParams::default();
        let sol = reference_solution(&mesh, &bcs, &p, None).unwrap();
        assert!(sol.steps >= 1 && sol.relative_residual <= NEWTON_TOLERANCE);
        let states = reference_states(&mesh, &sol.u, &p);
        let internal = assemble_vector(&mesh, |q| states[q].stress);
        let scale = internal.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(free_norm(&internal, &bcs) <= NEWTON_TOLERANCE * scale);
    }
}
