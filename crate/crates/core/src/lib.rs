//! Numerical laboratory for two-weight bump conditions of dyadic sparse
//! operators `T_{α,S}(σ·)`.
//!
//! Everything lives on a finite dyadic grid over `[0,1)^d` (`d ∈ {1,2}`):
//! weights are leaf-constant densities, suprema over cubes are maxima over
//! the grid, and the proof chains in [`prooftrace`] are checked with every
//! constant made explicit.

pub mod bumps;
pub mod error;
pub mod grid;
pub mod lab;
pub mod maximal;
pub mod operators;
pub mod prooftrace;
pub mod sparse;
pub mod weights;

pub use bumps::{BumpReport, EntropyFunction, EpsilonShape, ExponentConfig, TheoremMode};
pub use error::{Error, Result};
pub use grid::{CubeMap, DyadicCube, GridConfig};
pub use operators::TestingReport;
pub use prooftrace::{Strata, StrataKey, TraceReport};
pub use sparse::SparseFamily;
pub use weights::{LeafFunction, Weight, WeightKind};
