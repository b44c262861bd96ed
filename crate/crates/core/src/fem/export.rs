//! CSV export of nodal results and integration-point states.

use std::fmt::Write as _;

use crate::fem::mesh::Mesh;
use crate::phase::PhaseState;

pub const NODAL_HEADER: &str = "node,x,y,z,ux,uy,uz";
pub const POINT_HEADER: &str = "point,e11,e22,e33,g12,g13,g23,s11,s22,s33,s12,s13,s23";

pub fn nodal_csv(mesh: &Mesh, u: &[f64]) -> String {
    let mut out = String::from(NODAL_HEADER);
    out.push('\n');
    for (n, x) in mesh.nodes.iter().enumerate() {
        writeln!(out, "{n},{:?},{:?},{:?},{:?},{:?},{:?}", x.x, x.y, x.z, u[3 * n], u[3 * n + 1], u[3 * n + 2]).unwrap();
    }
    out
}

pub fn point_csv(states: &[PhaseState]) -> String {
    let mut out = String::from(POINT_HEADER);
    out.push('\n');
    for (p, s) in states.iter().enumerate() {
        write!(out, "{p}").unwrap();
        for v in s.to_array() {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts() {
        let mesh = Mesh::build(1.0, 1).unwrap();
        let csv = nodal_csv(&mesh, &vec![0.0; mesh.n_dofs()]);
        assert_eq!(csv.lines().count(), 9);
        let csv = point_csv(&vec![PhaseState::zero(); 3]);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 13);
    }
}
