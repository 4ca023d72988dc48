//! Stochastic bilevel optimization.
//!
//! Solves `min_x h(x) = F(z*(x), x)` with `z*(x) = argmin_z G(z, x)` where both
//! `F` and `G` are finite sums. The inner variable `z`, the adjoint variable `v`
//! (solution of the linear system defining the hypergradient) and the outer
//! variable `x` are updated jointly along three directions that are plain
//! sample means, so any unbiased finite-sum estimator plugs in:
//!
//! * [`directions::soba_directions`]: one sampled block per sum (SGD-like);
//! * [`directions::saba_directions`]: SAGA-style memory, variance goes to zero;
//! * [`directions::full_directions`]: exact means (deterministic baseline).
//!
//! [`solvers`] drives the joint loop and the two-loop Neumann baselines,
//! [`metrics`] provides exact ground-truth evaluation and [`problems`] the
//! concrete instances.

pub mod directions;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
pub use oracle::{BatchSpec, BilevelOracle, BilevelProblem, Blocks, JointState, ProblemDims};
