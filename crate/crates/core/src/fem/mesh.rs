use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::phase::VoigtVector;

pub const NODES_PER_ELEMENT: usize = 8;
pub const DOFS_PER_ELEMENT: usize = 3 * NODES_PER_ELEMENT;
pub const GAUSS_PER_ELEMENT: usize = 8;

pub type BMatrix = SMatrix<f64, 6, DOFS_PER_ELEMENT>;
pub type ElementVector = SVector<f64, DOFS_PER_ELEMENT>;

/// Reference coordinates of the hex8 nodes, counter-clockwise bottom then top.
const HEX_NODES: [[f64; 3]; NODES_PER_ELEMENT] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Strain-displacement operator and quadrature weight at one integration point.
#[derive(Debug, Clone)]
pub struct BOperator {
    pub element: usize,
    pub b: BMatrix,
    /// Gauss weight times Jacobian determinant, mm³.
    pub weight: f64,
}

/// Structured cube of trilinear hexahedra with 2x2x2 Gauss quadrature.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub side: f64,
    pub n_edge: usize,
    pub nodes: Vec<Vector3<f64>>,
    pub elements: Vec<[usize; NODES_PER_ELEMENT]>,
    /// Integration points, element-major (`8e .. 8e+8` belong to element `e`).
    pub gauss: Vec<BOperator>,
}

fn shape_gradients(xi: [f64; 3]) -> [[f64; 3]; NODES_PER_ELEMENT] {
    let mut g = [[0.0; 3]; NODES_PER_ELEMENT];
    for (a, n) in HEX_NODES.iter().enumerate() {
        let f = [1.0 + n[0] * xi[0], 1.0 + n[1] * xi[1], 1.0 + n[2] * xi[2]];
        g[a] = [
            0.125 * n[0] * f[1] * f[2],
            0.125 * f[0] * n[1] * f[2],
            0.125 * f[0] * f[1] * n[2],
        ];
    }
    g
}

/// Voigt B-matrix from physical shape-function gradients (engineering shear).
pub fn b_matrix(grads: &[Vector3<f64>; NODES_PER_ELEMENT]) -> BMatrix {
    let mut b = BMatrix::zeros();
    for (a, g) in grads.iter().enumerate() {
        let c = 3 * a;
        b[(0, c)] = g.x;
        b[(1, c + 1)] = g.y;
        b[(2, c + 2)] = g.z;
        b[(3, c)] = g.y;
        b[(3, c + 1)] = g.x;
        b[(4, c)] = g.z;
        b[(4, c + 2)] = g.x;
        b[(5, c + 1)] = g.z;
        b[(5, c + 2)] = g.y;
    }
    b
}

/// B-operators and weights at the eight Gauss points of a hex8 element.
pub fn hex8_operators(coords: &[Vector3<f64>; NODES_PER_ELEMENT]) -> Result<[(BMatrix, f64); GAUSS_PER_ELEMENT]> {
    let g = 1.0 / 3f64.sqrt();
    let mut out = [(BMatrix::zeros(), 0.0); GAUSS_PER_ELEMENT];
    for (q, slot) in out.iter_mut().enumerate() {
        let xi = [HEX_NODES[q][0] * g, HEX_NODES[q][1] * g, HEX_NODES[q][2] * g];
        let dn = shape_gradients(xi);
        let mut jac = Matrix3::zeros();
        for a in 0..NODES_PER_ELEMENT {
            for i in 0..3 {
                for j in 0..3 {
                    jac[(i, j)] += dn[a][i] * coords[a][j];
                }
            }
        }
        let det = jac.determinant();
        if !(det > 0.0) {
            return Err(Error::Contract(format!("non-positive Jacobian {det}")));
        }
        let inv = jac.try_inverse().expect("positive determinant");
        let grads: [Vector3<f64>; NODES_PER_ELEMENT] =
            std::array::from_fn(|a| inv * Vector3::new(dn[a][0], dn[a][1], dn[a][2]));
        *slot = (b_matrix(&grads), det);
    }
    Ok(out)
}

impl Mesh {
    /// Regular `n_edge³` grid on `[0, side]³`.
    pub fn build(side: f64, n_edge: usize) -> Result<Mesh> {
        if n_edge == 0 || !(side > 0.0 && side.is_finite()) {
            return Err(Error::Contract(format!("invalid mesh: side {side}, n_edge {n_edge}")));
        }
        let np = n_edge + 1;
        let h = side / n_edge as f64;
        let mut nodes = Vec::with_capacity(np * np * np);
        for k in 0..np {
            for j in 0..np {
                for i in 0..np {
                    nodes.push(Vector3::new(i as f64 * h, j as f64 * h, k as f64 * h));
                }
            }
        }
        let id = |i: usize, j: usize, k: usize| i + np * (j + np * k);
        let mut elements = Vec::with_capacity(n_edge.pow(3));
        for k in 0..n_edge {
            for j in 0..n_edge {
                for i in 0..n_edge {
                    elements.push([
                        id(i, j, k),
                        id(i + 1, j, k),
                        id(i + 1, j + 1, k),
                        id(i, j + 1, k),
                        id(i, j, k + 1),
                        id(i + 1, j, k + 1),
                        id(i + 1, j + 1, k + 1),
                        id(i, j + 1, k + 1),
                    ]);
                }
            }
        }
        let mut gauss = Vec::with_capacity(elements.len() * GAUSS_PER_ELEMENT);
        for (e, conn) in elements.iter().enumerate() {
            let coords = conn.map(|n| nodes[n]);
            for (b, weight) in hex8_operators(&coords)? {
                gauss.push(BOperator { element: e, b, weight });
            }
        }
        Ok(Mesh { side, n_edge, nodes, elements, gauss })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.nodes.len()
    }

    /// Number of integration points.
    pub fn n_points(&self) -> usize {
        self.gauss.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.gauss.iter().map(|g| g.weight).collect()
    }

    pub fn element_dofs(&self, e: usize) -> [usize; DOFS_PER_ELEMENT] {
        let conn = &self.elements[e];
        std::array::from_fn(|i| 3 * conn[i / 3] + i % 3)
    }

    pub fn gather(&self, e: usize, u: &[f64]) -> ElementVector {
        let dofs = self.element_dofs(e);
        ElementVector::from_fn(|i, _| u[dofs[i]])
    }

    /// `B·u` at integration point `p`.
    pub fn strain_at(&self, p: usize, u: &[f64]) -> VoigtVector {
        let g = &self.gauss[p];
        g.b * self.gather(g.element, u)
    }

    /// Strains at every integration point.
    pub fn strains(&self, u: &[f64]) -> Vec<VoigtVector> {
        (0..self.n_points()).map(|p| self.strain_at(p, u)).collect()
    }

    pub fn node_id(&self, i: usize, j: usize, k: usize) -> usize {
        let np = self.n_edge + 1;
        i + np * (j + np * k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let m = Mesh::build(10.0, 1).unwrap();
        assert_eq!((m.elements.len(), m.n_nodes(), m.n_points()), (1, 8, 8));
        let m = Mesh::build(10.0, 20).unwrap();
        assert_eq!(m.n_points(), 64_000);
        assert!(Mesh::build(10.0, 0).is_err());
    }

    #[test]
    fn weights_partition_volume() {
        for n in [1, 3, 5] {
            let m = Mesh::build(10.0, n).unwrap();
            let total: f64 = m.weights().iter().sum();
            assert!((total - 1000.0).abs() <= 1e-10 * 1000.0);
            for e in 0..m.elements.len() {
                let vol: f64 = m.gauss[8 * e..8 * e + 8].iter().map(|g| g.weight).sum();
                assert!((vol - 1000.0 / (n * n * n) as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rigid_translation_has_zero_strain() {
        let m = Mesh::build(10.0, 2).unwrap();
        for dir in 0..3 {
            let u: Vec<f64> = (0..m.n_dofs()).map(|d| if d % 3 == dir { 1.7 } else { 0.0 }).collect();
            for p in 0..m.n_points() {
                let b_norm = m.gauss[p].b.norm();
                let u_norm = m.gather(m.gauss[p].element, &u).norm();
                assert!(m.strain_at(p, &u).norm() <= 1e-12 * b_norm * u_norm);
            }
        }
    }

    #[test]
    fn linear_field_gives_exact_constant_strain() {
        let m = Mesh::build(10.0, 3).unwrap();
        // u = G x with a general (non-symmetric) gradient.
        let g = Matrix3::new(1e-3, 2e-3, -5e-4, 4e-4, -3e-3, 1e-3, 7e-4, 2e-4, 5e-3);
        let mut u = vec![0.0; m.n_dofs()];
        for (n, x) in m.nodes.iter().enumerate() {
            let v = g * x;
            u[3 * n..3 * n + 3].copy_from_slice(v.as_slice());
        }
        let expected = VoigtVector::new(
            g[(0, 0)],
            g[(1, 1)],
            g[(2, 2)],
            g[(0, 1)] + g[(1, 0)],
            g[(0, 2)] + g[(2, 0)],
            g[(1, 2)] + g[(2, 1)],
        );
        for p in 0..m.n_points() {
            assert!((m.strain_at(p, &u) - expected).amax() <= 1e-12);
        }
    }
}
