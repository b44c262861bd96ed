//! Structured hexahedral finite elements and the constraint-set projection.

pub mod bcs;
pub mod export;
pub mod mesh;
pub mod reference;
pub mod system;

pub use bcs::{twist_bcs, BoundaryConditions};
pub use mesh::{BOperator, Mesh};
pub use reference::{reference_solution, reference_states, ReferenceSolution};
pub use system::{assemble_k, Projection, SystemMatrices};
