//! Run configuration from a flat `key = value` file plus command-line overrides.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank lines are ignored;
//! keys are case-sensitive and may appear at most once per file. Lists are comma separated.
//! Paths in a file are relative to the file's directory; paths given with `--set` are relative
//! to the working directory.
//!
//! | key | value | default |
//! |-----|-------|---------|
//! | `model` | `poisson_growth`, `sir`, `rw2_binomial`, `linear_gaussian` | required for fit/eval |
//! | `data` | CSV path | required for fit/eval |
//! | `theta` | initial (fit) or evaluated (eval) parameters | model default |
//! | `fixed` | parameter names held at `theta` | none |
//! | `refinement` | in-between points per grid gap | `0` |
//! | `order` | `basic`, `higher`, `both` | `higher` |
//! | `out` | output directory | `out` |
//! | `seed` | restart and benchmark seed | `0` |
//! | `penalty_weight` | slope penalty for `rw2_binomial` | `1e6` |
//! | `transform` | variance-stabilizing coordinate for `poisson_growth` | `true` |
//! | `max_evaluations` | simplex budget per run | `500` |
//! | `restarts` | simplex restarts | `2` |
//! | `bench_sizes` | list of `n` | `1024,2048,4096` |
//! | `bench_p` | block size | `3` |
//! | `bench_repeats` | runs per size, median reported | `5` |

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use slam_core::laplace_core::Order;
use slam_core::models::{BuiltinModel, LinearGaussian, Model, PoissonGrowth, Rw2Binomial, Sir};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelName {
    PoissonGrowth,
    Sir,
    Rw2Binomial,
    LinearGaussian,
}

impl ModelName {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "poisson_growth" => Ok(Self::PoissonGrowth),
            "sir" => Ok(Self::Sir),
            "rw2_binomial" => Ok(Self::Rw2Binomial),
            "linear_gaussian" => Ok(Self::LinearGaussian),
            other => Err(CliError::Config(format!("unknown model {other:?}"))),
        }
    }

    fn default_theta(self) -> Vec<f64> {
        match self {
            Self::PoissonGrowth => vec![0.5],
            Self::Sir => vec![2.18e-3, 0.44, 0.1],
            Self::Rw2Binomial => vec![10.0],
            Self::LinearGaussian => vec![1.0, 1.0],
        }
    }
}

/// Which expansion orders to fit or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orders {
    Basic,
    Higher,
    Both,
}

impl Orders {
    pub fn list(self) -> Vec<Order> {
        match self {
            Self::Basic => vec![Order::Basic],
            Self::Higher => vec![Order::Higher],
            Self::Both => vec![Order::Basic, Order::Higher],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<ModelName>,
    pub data: Option<PathBuf>,
    pub theta: Option<Vec<f64>>,
    pub fixed: Vec<String>,
    pub refinement: usize,
    pub orders: Orders,
    pub out: PathBuf,
    pub seed: u64,
    pub penalty_weight: f64,
    pub transform: bool,
    pub max_evaluations: usize,
    pub restarts: usize,
    pub bench_sizes: Vec<usize>,
    pub bench_p: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            theta: None,
            fixed: Vec::new(),
            refinement: 0,
            orders: Orders::Higher,
            out: PathBuf::from("out"),
            seed: 0,
            penalty_weight: 1e6,
            transform: true,
            max_evaluations: 500,
            restarts: 2,
            bench_sizes: vec![1024, 2048, 4096],
            bench_p: 3,
            bench_repeats: 5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` pair; relative paths are joined to `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "model" => self.model = Some(ModelName::parse(v)?),
            "data" => self.data = Some(base.join(v)),
            "theta" => self.theta = Some(parse_list("theta", v)?),
            "fixed" => {
                self.fixed = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "refinement" => self.refinement = parse_num("refinement", v)?,
            "order" => {
                self.orders = match v {
                    "basic" => Orders::Basic,
                    "higher" => Orders::Higher,
                    "both" => Orders::Both,
                    other => return Err(CliError::Config(format!("order must be basic, higher or both, got {other:?}"))),
                }
            }
            "out" => self.out = base.join(v),
            "seed" => self.seed = parse_num("seed", v)?,
            "penalty_weight" => {
                self.penalty_weight = parse_num("penalty_weight", v)?;
                if !(self.penalty_weight > 0.0 && self.penalty_weight.is_finite()) {
                    return Err(CliError::Config("penalty_weight must be positive".into()));
                }
            }
            "transform" => self.transform = parse_num("transform", v)?,
            "max_evaluations" => self.max_evaluations = parse_num("max_evaluations", v)?,
            "restarts" => self.restarts = parse_num("restarts", v)?,
            "bench_sizes" => self.bench_sizes = parse_list("bench_sizes", v)?,
            "bench_p" => self.bench_p = parse_num("bench_p", v)?,
            "bench_repeats" => self.bench_repeats = parse_num("bench_repeats", v)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a configuration file's text.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
            }
            cfg.set(k, v, base)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {pair:?}")))?;
            self.set(k, v, Path::new(""))?;
        }
        Ok(())
    }

    /// The configured model; an error when absent.
    pub fn builtin_model(&self) -> Result<BuiltinModel, CliError> {
        let name = self
            .model
            .ok_or_else(|| CliError::Config("missing key \"model\"".into()))?;
        Ok(match name {
            ModelName::PoissonGrowth => BuiltinModel::PoissonGrowth(PoissonGrowth {
                transformed: self.transform,
            }),
            ModelName::Sir => BuiltinModel::Sir(Sir),
            ModelName::Rw2Binomial => BuiltinModel::Rw2Binomial(Rw2Binomial {
                penalty_weight: self.penalty_weight,
            }),
            ModelName::LinearGaussian => BuiltinModel::LinearGaussian(LinearGaussian),
        })
    }

    /// Parameters checked against the model's bounds.
    pub fn checked_theta(&self, model: &BuiltinModel) -> Result<Vec<f64>, CliError> {
        let theta = match &self.theta {
            Some(t) => t.clone(),
            None => self.model.expect("model checked").default_theta(),
        };
        model
            .check_theta(&theta)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(theta)
    }

    /// Free flags from the `fixed` names.
    pub fn free_flags(&self, model: &BuiltinModel) -> Result<Vec<bool>, CliError> {
        let names: Vec<&str> = model.params().iter().map(|p| p.name).collect();
        if let Some(bad) = self.fixed.iter().find(|f| !names.contains(&f.as_str())) {
            return Err(CliError::Config(format!("fixed names unknown parameter {bad:?}")));
        }
        Ok(names.iter().map(|n| !self.fixed.iter().any(|f| f == n)).collect())
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Config("missing key \"data\"".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_and_overrides() {
        let text = "# comment\nmodel = sir\ndata = d.csv  # trailing\ntheta = 1e-3, 0.4, 0.1\nfixed = sigma\norder = both\n";
        let mut cfg = RunConfig::parse(text, Path::new("cfg")).unwrap();
        assert_eq!(cfg.model, Some(ModelName::Sir));
        assert_eq!(cfg.data, Some(PathBuf::from("cfg/d.csv")));
        assert_eq!(cfg.theta, Some(vec![1e-3, 0.4, 0.1]));
        assert_eq!(cfg.orders, Orders::Both);
        cfg.apply_overrides(&["refinement=2".into(), "data=x.csv".into()]).unwrap();
        assert_eq!(cfg.refinement, 2);
        assert_eq!(cfg.data, Some(PathBuf::from("x.csv")));
        let m = cfg.builtin_model().unwrap();
        assert_eq!(cfg.free_flags(&m).unwrap(), vec![true, true, false]);
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        assert!(RunConfig::parse("model sir", base).is_err());
        assert!(RunConfig::parse("colour = red", base).is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2", base).is_err());
        assert!(RunConfig::parse("refinement = -1", base).is_err());
        let cfg = RunConfig::parse("model = sir\ntheta = 1e-3, 0.4, -0.1", base).unwrap();
        let m = cfg.builtin_model().unwrap();
        assert!(matches!(cfg.checked_theta(&m), Err(CliError::Config(_))));
        assert!(RunConfig::default().builtin_model().is_err());
    }
}
