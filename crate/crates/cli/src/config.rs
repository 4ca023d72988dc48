//! Experiment files.
//!
//! ```toml
//! out_dir = "results/quadratic"
//! seeds = [0, 1, 2]
//! eval_every = 10
//!
//! [problem]
//! family = "quadratic"
//! seed = 0
//! n = 64
//! m = 64
//! p = 10
//! d = 10
//!
//! [[solvers]]
//! method = "saba"
//! alpha = 0.1
//! ratio = 10.0
//! total_iters = 2000
//!
//! [grid]
//! alphas = { lo = 1e-3, hi = 1.0, count = 9 }
//! ratios = [1.0, 10.0, 100.0]
//! objective = "suboptimality"
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use bilevel::solvers::{GridObjective, GridSpec, MemoryInit, Method, SolverConfig, StepSchedule};
use bilevel::{BatchSpec, ProblemDims};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub solvers: Vec<SolverSpec>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Metric cadence in iterations; a solver entry may override it.
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Per-cell solver wall-clock budget.
    #[serde(default)]
    pub wall_budget_seconds: Option<f64>,
    /// Reference optimum written by `cache-optimum` and read by `run`.
    #[serde(default)]
    pub optimum_cache: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<GridBlock>,
}

fn default_one() -> usize {
    1
}

/// Problem family and its parameters. Relative data paths resolve against
/// the dataset cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        seed: u64,
        n: usize,
        m: usize,
        p: usize,
        d: usize,
        #[serde(default = "default_mu")]
        mu: f64,
    },
    ToyRidge {
        seed: u64,
    },
    LogregSynthetic {
        seed: u64,
        n: usize,
        m: usize,
        p: usize,
        density: f64,
    },
    LogregLibsvm {
        train: PathBuf,
        validation: PathBuf,
    },
    HypercleanSynthetic {
        seed: u64,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        features: usize,
        classes: usize,
        separation: f64,
        p_corrupt: f64,
        c_r: f64,
    },
    HypercleanLibsvm {
        seed: u64,
        train: PathBuf,
        validation: PathBuf,
        test: PathBuf,
        classes: usize,
        p_corrupt: f64,
        c_r: f64,
    },
}

fn default_mu() -> f64 {
    1.0
}

/// One solver entry; `label` names its cells and defaults to the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub method: Method,
    #[serde(default)]
    pub label: Option<String>,
    pub alpha: f64,
    /// Outer step; give either this or `ratio = alpha / beta`.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub ratio: Option<f64>,
    /// Step exponents; default to the method's.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default = "default_one")]
    pub batch_inner: usize,
    #[serde(default = "default_one")]
    pub batch_outer: usize,
    pub total_iters: usize,
    #[serde(default)]
    pub inner_steps: Option<usize>,
    #[serde(default)]
    pub neumann_steps: Option<usize>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub recompute_every: Option<usize>,
    #[serde(default)]
    pub memory_init: MemoryInit,
    #[serde(default)]
    pub oracle_budget: Option<u64>,
}

/// Step-size grid shared by every solver entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub alphas: GridAxis,
    pub ratios: GridAxis,
    /// Replicates per cell; defaults to the number of seeds.
    #[serde(default)]
    pub runs_per_cell: Option<usize>,
    pub objective: GridObjective,
}

/// Explicit values or `count` log-spaced values between `lo` and `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridAxis {
    Values(Vec<f64>),
    Log { lo: f64, hi: f64, count: usize },
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GridAxis::Values(v) => v.clone(),
            GridAxis::Log { lo, hi, count } => bilevel::solvers::log_grid(*lo, *hi, *count),
        }
    }
}

impl SolverSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    /// Builds the solver configuration for one seed.
    pub fn to_config(&self, seed: u64, experiment: &ExperimentConfig) -> SolverConfig {
        let (a0, b0) = self.method.default_exponents();
        let beta = match (self.beta, self.ratio) {
            (Some(beta), _) => beta,
            (None, Some(r)) => self.alpha / r,
            (None, None) => 0.0,
        };
        let mut cfg = SolverConfig::new(self.method, self.alpha, beta, self.total_iters);
        cfg.schedule = StepSchedule {
            alpha: self.alpha,
            beta,
            a: self.a.unwrap_or(a0),
            b: self.b.unwrap_or(b0),
        };
        cfg.batch = BatchSpec {
            inner: self.batch_inner,
            outer: self.batch_outer,
        };
        cfg.seed = seed;
        cfg.inner_steps = self.inner_steps.unwrap_or(cfg.inner_steps);
        cfg.neumann_steps = self.neumann_steps.unwrap_or(cfg.neumann_steps);
        cfg.eta = self.eta;
        cfg.eval_every = self.eval_every.unwrap_or(experiment.eval_every);
        cfg.recompute_every = self.recompute_every;
        cfg.memory_init = self.memory_init;
        cfg.oracle_budget = self.oracle_budget;
        cfg.wall_budget_seconds = experiment.wall_budget_seconds;
        cfg
    }
}

impl ExperimentConfig {
    /// Parses TOML, reporting schema violations with the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().message().trim().to_string())
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok((Self::from_toml(&text)?, text))
    }

    /// Checks everything that does not need the problem data.
    pub fn validate(&self) -> Result<()> {
        if self.solvers.is_empty() {
            return Err(config_err("solvers", "at least one solver is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every", "must be at least 1"));
        }
        if let Some(w) = self.wall_budget_seconds {
            if !(w > 0.0) {
                return Err(config_err("wall_budget_seconds", "must be positive"));
            }
        }
        let mut labels = HashSet::new();
        for (k, s) in self.solvers.iter().enumerate() {
            let at = |field: &str| format!("solvers[{k}].{field}");
            if !labels.insert(s.label()) {
                return Err(config_err(at("label"), format!("duplicate label {:?}", s.label())));
            }
            if s.beta.is_some() && s.ratio.is_some() {
                return Err(config_err(at("ratio"), "give either beta or ratio, not both"));
            }
            if s.ratio.is_some_and(|r| !(r > 0.0)) {
                return Err(config_err(at("ratio"), "must be positive"));
            }
            if s.label().contains(['/', '\\']) {
                return Err(config_err(at("label"), "must not contain path separators"));
            }
            let cfg = s.to_config(0, self);
            cfg.schedule.validate().map_err(|e| config_err(at("alpha"), e.to_string()))?;
            if cfg.eval_every == 0 {
                return Err(config_err(at("eval_every"), "must be at least 1"));
            }
        }
        if let Some(grid) = &self.grid {
            for (name, axis) in [("grid.alphas", &grid.alphas), ("grid.ratios", &grid.ratios)] {
                let values = axis.values();
                if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(config_err(name, "needs at least one finite positive value"));
                }
            }
            if grid.runs_per_cell == Some(0) {
                return Err(config_err("grid.runs_per_cell", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Checks each solver against the problem dimensions.
    pub fn validate_for(&self, dims: ProblemDims) -> Result<()> {
        for (k, s) in self.solvers.iter().enumerate() {
            s.to_config(0, self)
                .validate(dims)
                .map_err(|e| config_err(format!("solvers[{k}]"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Option<(GridSpec, GridObjective)> {
        self.grid.as_ref().map(|g| {
            let spec = GridSpec {
                alphas: g.alphas.values(),
                ratios: g.ratios.values(),
                runs_per_cell: g.runs_per_cell.unwrap_or(self.seeds.len()),
            };
            (spec, g.objective)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out_dir = "out"
seeds = [3]

[problem]
family = "quadratic"
seed = 1
n = 8
m = 8
p = 3
d = 2

[[solvers]]
method = "soba"
alpha = 0.5
ratio = 5.0
total_iters = 10
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        let solver = cfg.solvers[0].to_config(7, &cfg);
        assert_eq!(solver.seed, 7);
        assert!((solver.schedule.beta - 0.1).abs() < 1e-15);
        assert_eq!((solver.schedule.a, solver.schedule.b), (0.5, 0.5));
        assert_eq!(cfg.eval_every, 1);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = MINIMAL.replace("alpha = 0.5", "alpha = \"fast\"");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.starts_with("solvers[0].alpha"), "{err}");
        let unknown = MINIMAL.replace("total_iters = 10", "total_iters = 10\nstepsize = 1");
        let err = ExperimentConfig::from_toml(&unknown).unwrap_err().to_string();
        assert!(err.contains("stepsize"), "{err}");
    }

    #[test]
    fn rejects_empty_lists_and_duplicate_labels() {
        let no_seeds = MINIMAL.replace("seeds = [3]", "seeds = []");
        let cfg = ExperimentConfig::from_toml(&no_seeds).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().starts_with("seeds"));
        let twice = format!("{MINIMAL}\n[[solvers]]\nmethod = \"soba\"\nalpha = 1.0\ntotal_iters = 5\n");
        let cfg = ExperimentConfig::from_toml(&twice).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn grid_axes_accept_lists_and_ranges() {
        let text = format!("{MINIMAL}\n[grid]\nalphas = {{ lo = 0.01, hi = 1.0, count = 3 }}\nratios = [0.5]\nobjective = \"value\"\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let (spec, objective) = cfg.grid_spec().unwrap();
        assert_eq!(spec.alphas.len(), 3);
        assert!((spec.alphas[1] - 0.1).abs() < 1e-12);
        assert_eq!(spec.ratios, vec![0.5]);
        assert_eq!(spec.runs_per_cell, 1);
        assert_eq!(objective, GridObjective::Value);
    }
}
