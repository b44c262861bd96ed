//! Data-driven computational mechanics on a 3D elastic cube.
//!
//! The solver alternates between projecting data states onto the set of
//! compatible, equilibrated fields ([`fem`]) and projecting those fields back
//! onto the material data set by nearest-neighbor search ([`nn`]). The
//! search structures accept an accuracy parameter that the solver schedules
//! across iterations ([`solver`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dataset_io;
pub mod error;
pub mod fem;
pub mod matgen;
pub mod nn;
pub mod phase;
pub mod solver;

pub use error::{Error, FormatError, Result};
pub use matgen::{MaterialDataset, MaterialParams};
pub use phase::{MappedPoint, MetricC, PhaseState, VoigtVector};
