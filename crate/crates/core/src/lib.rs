//! Numerical verification of Poincaré inequalities on parametric
//! semialgebraic domain families.

pub mod cells;
pub mod dsl;
pub mod harness;
pub mod poly;
pub mod raster;
pub mod sobolev;
pub mod tangent;

mod linalg;
