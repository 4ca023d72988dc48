//! Concrete bilevel instances.

pub mod dataset;
pub mod hyperclean;
pub mod logreg;
pub mod quadratic;
pub mod ridge;

pub use dataset::{parse_libsvm, SparseDataset};
pub use hyperclean::{corrupt_labels, make_hyperclean, make_synthetic_hyperclean, HyperCleanProblem};
pub use logreg::{make_logreg_hyper, make_synthetic_logreg, LogRegHyperProblem};
pub use quadratic::{make_quadratic, QuadraticBilevel, QuadraticOuter};
pub use ridge::{make_toy_ridge, ToyRidgeProblem};
