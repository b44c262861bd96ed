use nalgebra::{Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::fem::mesh::Mesh;

/// Partition of all dofs into fixed (zero), prescribed (non-zero value) and free.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConditions {
    n_dofs: usize,
    pub fixed: Vec<usize>,
    pub prescribed: Vec<(usize, f64)>,
    pub free: Vec<usize>,
    /// Position of each dof in `free`, if free.
    free_slot: Vec<Option<usize>>,
}

impl BoundaryConditions {
    /// Every dof not listed in `fixed` or `prescribed` is free.
    pub fn new(n_dofs: usize, fixed: Vec<usize>, prescribed: Vec<(usize, f64)>) -> Result<Self> {
        let mut seen = vec![false; n_dofs];
        for &d in fixed.iter().chain(prescribed.iter().map(|(d, _)| d)) {
            if d >= n_dofs {
                return Err(Error::Contract(format!("dof {d} out of range")));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::Contract(format!("dof {d} constrained twice")));
            }
        }
        if let Some((d, v)) = prescribed.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Contract(format!("dof {d} prescribed non-finite value {v}")));
        }
        let free: Vec<usize> = (0..n_dofs).filter(|&d| !seen[d]).collect();
        let mut free_slot = vec![None; n_dofs];
        for (i, &d) in free.iter().enumerate() {
            free_slot[d] = Some(i);
        }
        Ok(Self { n_dofs, fixed, prescribed, free, free_slot })
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_slot(&self, dof: usize) -> Option<usize> {
        self.free_slot[dof]
    }

    /// Full-length vector holding the constrained values and zeros elsewhere.
    pub fn constrained_values(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.n_dofs];
        for &(d, v) in &self.prescribed {
            u[d] = v;
        }
        u
    }
}

/// Bottom face clamped; top face rotated by `theta_deg` about the vertical
/// center axis and held in z.
pub fn twist_bcs(mesh: &Mesh, theta_deg: f64) -> Result<BoundaryConditions> {
    let np = mesh.n_edge + 1;
    let top = mesh.n_edge;
    let center = Vector3::new(0.5 * mesh.side, 0.5 * mesh.side, 0.0);
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), theta_deg.to_radians());
    let mut fixed = Vec::new();
    let mut prescribed = Vec::new();
    for j in 0..np {
        for i in 0..np {
            let n = mesh.node_id(i, j, 0);
            fixed.extend([3 * n, 3 * n + 1, 3 * n + 2]);
            let n = mesh.node_id(i, j, top);
            let x = mesh.nodes[n] - center;
            let x = Vector3::new(x.x, x.y, 0.0);
            let du = rot * x - x;
            prescribed.extend([(3 * n, du.x), (3 * n + 1, du.y), (3 * n + 2, 0.0)]);
        }
    }
    BoundaryConditions::new(mesh.n_dofs(), fixed, prescribed)
}
