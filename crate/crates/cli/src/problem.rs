//! Builds the configured problem behind one concrete type.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use bilevel::oracle::GTerms;
use bilevel::problems::{
    dataset, make_hyperclean, make_logreg_hyper, make_quadratic, make_synthetic_hyperclean,
    make_synthetic_logreg, make_toy_ridge, parse_libsvm, HyperCleanProblem, LogRegHyperProblem,
    QuadraticBilevel, SparseDataset, ToyRidgeProblem,
};
use bilevel::{BilevelOracle, BilevelProblem, ProblemDims};

use crate::config::ProblemSpec;
use crate::error::{IoContext, Result};

pub enum AnyProblem {
    Quadratic(QuadraticBilevel),
    Ridge(ToyRidgeProblem),
    Logreg(LogRegHyperProblem),
    HyperClean(HyperCleanProblem),
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dataset::data_dir().join(path)
    }
}

fn read_libsvm(path: &Path) -> Result<SparseDataset> {
    let path = resolve(path);
    let file = File::open(&path).at(&path)?;
    Ok(parse_libsvm(BufReader::new(file))?)
}

impl AnyProblem {
    pub fn build(spec: &ProblemSpec) -> Result<Self> {
        Ok(match spec {
            ProblemSpec::Quadratic { seed, n, m, p, d, mu } => {
                AnyProblem::Quadratic(make_quadratic(*seed, ProblemDims::new(*n, *m, *p, *d)?, *mu)?)
            }
            ProblemSpec::ToyRidge { seed } => AnyProblem::Ridge(make_toy_ridge(*seed)),
            ProblemSpec::LogregSynthetic { seed, n, m, p, density } => {
                AnyProblem::Logreg(make_synthetic_logreg(*seed, *n, *m, *p, *density)?)
            }
            ProblemSpec::LogregLibsvm { train, validation } => {
                AnyProblem::Logreg(make_logreg_hyper(read_libsvm(train)?, read_libsvm(validation)?)?)
            }
            ProblemSpec::HypercleanSynthetic {
                seed,
                n_train,
                n_val,
                n_test,
                features,
                classes,
                separation,
                p_corrupt,
                c_r,
            } => AnyProblem::HyperClean(make_synthetic_hyperclean(
                *seed, *n_train, *n_val, *n_test, *features, *classes, *separation, *p_corrupt, *c_r,
            )?),
            ProblemSpec::HypercleanLibsvm {
                seed,
                train,
                validation,
                test,
                classes,
                p_corrupt,
                c_r,
            } => AnyProblem::HyperClean(make_hyperclean(
                read_libsvm(train)?,
                read_libsvm(validation)?,
                read_libsvm(test)?,
                *classes,
                *p_corrupt,
                *c_r,
                *seed,
            )?),
        })
    }
}

macro_rules! each {
    ($self:ident, $p:ident => $body:expr) => {
        match $self {
            AnyProblem::Quadratic($p) => $body,
            AnyProblem::Ridge($p) => $body,
            AnyProblem::Logreg($p) => $body,
            AnyProblem::HyperClean($p) => $body,
        }
    };
}

impl BilevelOracle for AnyProblem {
    fn dims(&self) -> ProblemDims {
        each!(self, p => p.dims())
    }

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64 {
        each!(self, p => p.g_value(i, z, x))
    }

    fn f_value(&self, j: usize, z: &[f64], x: &[f64]) -> f64 {
        each!(self, p => p.f_value(j, z, x))
    }

    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        each!(self, p => p.add_grad_g_in(i, z, x, scale, out))
    }

    fn add_hvp_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        each!(self, p => p.add_hvp_g(i, z, x, v, scale, out))
    }

    fn add_cross_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        each!(self, p => p.add_cross_g(i, z, x, v, scale, out))
    }

    fn add_grad_f_in(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        each!(self, p => p.add_grad_f_in(j, z, x, scale, out))
    }

    fn add_grad_f_out(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        each!(self, p => p.add_grad_f_out(j, z, x, scale, out))
    }

    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        each!(self, p => p.add_g_terms(i, z, x, v, scale, out))
    }

    fn add_f_terms(&self, j: usize, z: &[f64], x: &[f64], scale: f64, grad_in: &mut [f64], grad_out: &mut [f64]) {
        each!(self, p => p.add_f_terms(j, z, x, scale, grad_in, grad_out))
    }
}

impl BilevelProblem for AnyProblem {
    fn name(&self) -> &str {
        each!(self, p => p.name())
    }

    fn initial_outer(&self) -> Vec<f64> {
        each!(self, p => p.initial_outer())
    }

    fn strong_convexity(&self, x: &[f64]) -> Option<f64> {
        each!(self, p => p.strong_convexity(x))
    }

    fn test_error(&self, z: &[f64]) -> Option<f64> {
        each!(self, p => p.test_error(z))
    }

    fn closed_form_optimum(&self) -> Option<f64> {
        each!(self, p => p.closed_form_optimum())
    }

    fn fingerprint(&self) -> String {
        each!(self, p => p.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delegates_to_the_built_family() {
        let spec = ProblemSpec::Quadratic {
            seed: 2,
            n: 5,
            m: 4,
            p: 3,
            d: 2,
            mu: 1.0,
        };
        let pb = AnyProblem::build(&spec).unwrap();
        let direct = make_quadratic(2, ProblemDims::new(5, 4, 3, 2).unwrap(), 1.0).unwrap();
        assert_eq!(pb.dims(), direct.dims());
        assert_eq!(pb.fingerprint(), direct.fingerprint());
        assert_eq!(pb.closed_form_optimum(), direct.closed_form_optimum());
        let z = [0.3, -0.1, 0.2];
        let x = [1.0, 2.0];
        assert_eq!(pb.g_value(3, &z, &x), direct.g_value(3, &z, &x));
    }

    #[test]
    fn missing_data_file_names_the_path() {
        let spec = ProblemSpec::LogregLibsvm {
            train: PathBuf::from("/nonexistent/train.svm"),
            validation: PathBuf::from("/nonexistent/val.svm"),
        };
        let err = AnyProblem::build(&spec).err().unwrap().to_string();
        assert!(err.contains("/nonexistent/train.svm"), "{err}");
    }
}
