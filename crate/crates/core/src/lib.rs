//! Iteratively regularized Gauss-Newton estimation for nonparametric
//! instrumental-variable regression.
//!
//! The structural function `φ` is recovered from a nonlinear integral
//! equation `F̂(φ) = 0` whose kernel is built from a kernel density estimate
//! of `(Y, X, Z)`. Each outer Gauss-Newton step is regularized by `m`
//! iterated Tikhonov steps, and the iteration is stopped either a priori or
//! by the Lepskiĭ balancing principle.
//!
//! ```
//! use irgnm::{generate_sample, reconstruct, PipelineSettings, Scenario};
//!
//! let scn = Scenario::default();
//! let sample = generate_sample(&scn, 300, 7).unwrap();
//! let settings = PipelineSettings { grid_n: 20, ..Default::default() };
//! let rec = reconstruct(&scn, &sample, &settings).unwrap();
//! assert_eq!(rec.ind_estimate().values().len(), 20);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod irgnm;
pub mod kde;
pub mod numerics;
pub mod operators;
pub mod regularization;
pub mod simulation;
pub mod stats;
pub mod stopping;

pub use crate::error::{Error, Result};
pub use crate::irgnm::{run as run_irgnm, IrgnmConfig, IrgnmRun};
pub use crate::kde::{DensityModel, KernelFamily, KernelSpec, Record, Sample};
pub use crate::numerics::{Grid1D, Grid3, GridFn};
pub use crate::operators::{DensityFields, ForwardModel, IvProblem, ProblemKind};
pub use crate::regularization::{FilterParams, PenaltySpace};
pub use crate::simulation::{
    generate_sample, reconstruct, run_monte_carlo, McConfig, PipelineSettings, Reconstruction, Scenario,
};
pub use crate::stopping::{NoiseLevels, PhiBound, TheoryConstants};
