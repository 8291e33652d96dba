//! State-space models: local likelihood pieces, coordinate transforms and built-ins.
//!
//! A model describes `ell(y) = sum_data ell_data + sum_intervals ell_trans` in its original
//! coordinates together with a per-coordinate bijection to latent ("transformed") coordinates.
//! The core only ever sees latent coordinates; [`Objective`] composes the transform, the
//! log-Jacobian and the local terms and differentiates them with jets.

use crate::error::{Error, Result};
use crate::jet::{JetSpace, Real};
use crate::sparse_tensors::{LocalDerivs, LocalTensorBundle};

/// Time points with the subset of indices that carry data.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    data_idx: Vec<usize>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, data_idx: Vec<usize>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Invalid("time grid is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("time grid has non-finite times".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("times must be strictly increasing".into()));
        }
        if data_idx.is_empty() {
            return Err(Error::Invalid("time grid needs at least one data index".into()));
        }
        if data_idx.windows(2).any(|w| w[1] <= w[0]) || *data_idx.last().unwrap() >= times.len() {
            return Err(Error::Invalid("data indices must be increasing and in range".into()));
        }
        Ok(Self { times, data_idx })
    }

    /// Grid whose every point carries data.
    pub fn from_data_times(times: Vec<f64>) -> Result<Self> {
        let idx = (0..times.len()).collect();
        Self::new(times, idx)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn data_idx(&self) -> &[usize] {
        &self.data_idx
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }
}

/// One observation in original coordinates; `None` marks an unobserved coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<Option<f64>>,
    /// Number of trials for binomial data.
    pub trials: Option<f64>,
}

impl Observation {
    pub fn full(values: &[f64]) -> Self {
        Self {
            values: values.iter().map(|&v| Some(v)).collect(),
            trials: None,
        }
    }
}

/// Observations aligned with [`TimeGrid::data_idx`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub points: Vec<Observation>,
}

/// Named model parameter with open bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub lower: f64,
    pub upper: f64,
}

impl ParamSpec {
    pub const fn positive(name: &'static str) -> Self {
        Self {
            name,
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }
}

/// Local description of a state-space model.
///
/// `transition` and `observation` are negative log densities in ORIGINAL coordinates;
/// `from_latent`/`to_latent` give the bijection per coordinate and `log_jacobian` is
/// `log |dx/dv|`, so that `exp(-ell)` integrates to the same value in either coordinates.
pub trait Model {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<ParamSpec>;

    fn to_latent(&self, coord: usize, x: f64) -> Result<f64>;
    fn from_latent<R: Real>(&self, coord: usize, v: &R) -> R;
    fn log_jacobian<R: Real>(&self, coord: usize, v: &R) -> R;

    /// Whether a latent state lies in the open domain of the model.
    fn in_domain(&self, v: &[f64]) -> bool;

    fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R;
    fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R;

    /// Latent value implied by an observation, used to build the initial path.
    fn observed_latent(&self, obs: &Observation, coord: usize) -> Option<f64> {
        obs.values
            .get(coord)
            .copied()
            .flatten()
            .and_then(|x| self.to_latent(coord, x).ok())
    }

    /// Latent value for coordinates never observed.
    fn default_latent(&self, _coord: usize) -> f64 {
        0.0
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let specs = self.params();
        if theta.len() != specs.len() {
            return Err(Error::Invalid(format!(
                "{} expects {} parameters, got {}",
                self.name(),
                specs.len(),
                theta.len()
            )));
        }
        for (v, s) in theta.iter().zip(&specs) {
            if !v.is_finite() || *v <= s.lower || *v >= s.upper {
                return Err(Error::Invalid(format!(
                    "parameter {} = {v} outside ({}, {})",
                    s.name, s.lower, s.upper
                )));
            }
        }
        Ok(())
    }

    fn check_observation(&self, obs: &Observation) -> Result<()> {
        if obs.values.len() != self.dim() {
            return Err(Error::Invalid(format!(
                "observation has {} values, model has {} coordinates",
                obs.values.len(),
                self.dim()
            )));
        }
        for (c, v) in obs.values.iter().enumerate() {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Invalid("non-finite observation".into()));
                }
                self.to_latent(c, *x)?;
            }
        }
        Ok(())
    }
}

/// Applies the coordinate bijection to every observed value.
pub fn transform_data<M: Model>(model: &M, obs: &Observations) -> Result<Vec<Vec<Option<f64>>>> {
    obs.points
        .iter()
        .map(|o| {
            model.check_observation(o)?;
            Ok((0..model.dim()).map(|c| model.observed_latent(o, c)).collect())
        })
        .collect()
}

/// Negative log-likelihood `ell` in latent coordinates for fixed parameters and data.
#[derive(Debug, Clone)]
pub struct Objective<'a, M: Model> {
    model: &'a M,
    theta: Vec<f64>,
    grid: &'a TimeGrid,
    obs: &'a Observations,
    node_obs: Vec<Option<usize>>,
}

impl<'a, M: Model> Objective<'a, M> {
    pub fn new(model: &'a M, theta: &[f64], grid: &'a TimeGrid, obs: &'a Observations) -> Result<Self> {
        model.check_theta(theta)?;
        if obs.points.len() != grid.data_idx().len() {
            return Err(Error::Invalid(format!(
                "{} observations for {} data indices",
                obs.points.len(),
                grid.data_idx().len()
            )));
        }
        for o in &obs.points {
            model.check_observation(o)?;
        }
        let mut node_obs = vec![None; grid.n()];
        for (k, &i) in grid.data_idx().iter().enumerate() {
            node_obs[i] = Some(k);
        }
        Ok(Self {
            model,
            theta: theta.to_vec(),
            grid,
            obs,
            node_obs,
        })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn p(&self) -> usize {
        self.model.dim()
    }

    fn interval_term<R: Real>(&self, i: usize, v: &[R]) -> R {
        let p = self.p();
        let x: Vec<R> = (0..2 * p).map(|k| self.model.from_latent(k % p, &v[k])).collect();
        self.model
            .transition(&self.theta, self.grid.dt(i), &x[..p], &x[p..])
    }

    fn node_term<R: Real>(&self, i: usize, v: &[R]) -> R {
        let p = self.p();
        let mut acc = v[0].lift(0.0);
        for (c, vc) in v.iter().enumerate() {
            acc = acc - self.model.log_jacobian(c, vc);
        }
        if let Some(k) = self.node_obs[i] {
            let x: Vec<R> = (0..p).map(|c| self.model.from_latent(c, &v[c])).collect();
            acc = acc + self.model.observation(&self.theta, &self.obs.points[k], &x);
        }
        acc
    }

    fn check_domain(&self, y: &[f64]) -> Result<()> {
        let p = self.p();
        if y.len() != self.n() * p {
            return Err(Error::Invalid("path length does not match n * p".into()));
        }
        for (i, v) in y.chunks(p).enumerate() {
            if v.iter().any(|x| !x.is_finite()) || !self.model.in_domain(v) {
                return Err(Error::Domain(format!("state at time index {i} is {v:?}")));
            }
        }
        Ok(())
    }

    /// `ell(y)`; `+inf` outside the model domain.
    pub fn value(&self, y: &[f64]) -> f64 {
        if self.check_domain(y).is_err() {
            return f64::INFINITY;
        }
        let p = self.p();
        let mut total = 0.0;
        for i in 0..self.n() - 1 {
            total += self.interval_term(i, &y[i * p..(i + 2) * p]);
        }
        for i in 0..self.n() {
            total += self.node_term(i, &y[i * p..(i + 1) * p]);
        }
        if total.is_nan() {
            f64::INFINITY
        } else {
            total
        }
    }

    /// Local derivative arrays of `ell` at `y` up to `order` (1..=4).
    pub fn bundle(&self, y: &[f64], order: usize) -> Result<LocalTensorBundle> {
        self.check_domain(y)?;
        let p = self.p();
        let pair = JetSpace::get(2 * p, order);
        let single = JetSpace::get(p, order);
        let mut intervals = Vec::with_capacity(self.n() - 1);
        for i in 0..self.n() - 1 {
            let v = pair.variables(&y[i * p..(i + 2) * p]);
            intervals.push(self.interval_term(i, &v).to_local_derivs());
        }
        let mut nodes = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let v = single.variables(&y[i * p..(i + 1) * p]);
            nodes.push(self.node_term(i, &v).to_local_derivs());
        }
        let all_finite = |d: &LocalDerivs| {
            d.value.is_finite()
                && d.grad.iter().chain(&d.hess).chain(&d.third).chain(&d.fourth).all(|x| x.is_finite())
        };
        if !intervals.iter().chain(&nodes).all(all_finite) {
            return Err(Error::Domain("non-finite local derivatives".into()));
        }
        LocalTensorBundle::new(p, intervals, nodes)
    }

    /// Local derivatives of one interval term, for derivative checks.
    pub fn interval_derivs(&self, i: usize, v: &[f64], order: usize) -> LocalDerivs {
        let vars = JetSpace::get(2 * self.p(), order).variables(v);
        self.interval_term(i, &vars).to_local_derivs()
    }

    /// Local derivatives of one node term, for derivative checks.
    pub fn node_derivs(&self, i: usize, v: &[f64], order: usize) -> LocalDerivs {
        let vars = JetSpace::get(self.p(), order).variables(v);
        self.node_term(i, &vars).to_local_derivs()
    }

    pub fn interval_value(&self, i: usize, v: &[f64]) -> f64 {
        self.interval_term(i, v)
    }

    pub fn node_value(&self, i: usize, v: &[f64]) -> f64 {
        self.node_term(i, v)
    }

    /// Initial latent path: piecewise-linear interpolation of transformed data per coordinate,
    /// constant beyond the first and last observation.
    pub fn initial_path(&self) -> Vec<f64> {
        let (n, p) = (self.n(), self.p());
        let times = self.grid.times();
        let mut y = vec![0.0; n * p];
        for c in 0..p {
            let known: Vec<(f64, f64)> = self
                .grid
                .data_idx()
                .iter()
                .zip(&self.obs.points)
                .filter_map(|(&i, o)| self.model.observed_latent(o, c).map(|v| (times[i], v)))
                .collect();
            for i in 0..n {
                y[i * p + c] = interpolate(&known, times[i]).unwrap_or(self.model.default_latent(c));
            }
        }
        y
    }

    /// Latent path mapped back to original coordinates.
    pub fn to_original(&self, y: &[f64]) -> Vec<f64> {
        let p = self.p();
        y.iter()
            .enumerate()
            .map(|(k, v)| self.model.from_latent(k % p, v))
            .collect()
    }
}

fn interpolate(known: &[(f64, f64)], t: f64) -> Option<f64> {
    let first = known.first()?;
    let last = known.last()?;
    if t <= first.0 {
        return Some(first.1);
    }
    if t >= last.0 {
        return Some(last.1);
    }
    let k = known.partition_point(|(s, _)| *s <= t);
    let (t0, v0) = known[k - 1];
    let (t1, v1) = known[k];
    Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Counts growing at rate `theta` with Poisson-sized increments, normally approximated.
///
/// `Delta y ~ N(theta y dt, theta y dt)`; data `y* ~ N(y, y*)`. With `transformed` the latent
/// coordinate is `v = 2 sqrt(y)`, otherwise `y` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonGrowth {
    pub transformed: bool,
}

impl Model for PoissonGrowth {
    fn name(&self) -> &str {
        if self.transformed {
            "poisson_growth"
        } else {
            "poisson_growth_untransformed"
        }
    }

    fn dim(&self) -> usize {
        1
    }

    fn params(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::positive("theta")]
    }

    fn to_latent(&self, _coord: usize, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Err(Error::Domain(format!("count must be positive, got {x}")));
        }
        Ok(if self.transformed { 2.0 * x.sqrt() } else { x })
    }

    fn from_latent<R: Real>(&self, _coord: usize, v: &R) -> R {
        if self.transformed {
            v.square() / 4.0
        } else {
            v.clone()
        }
    }

    fn log_jacobian<R: Real>(&self, _coord: usize, v: &R) -> R {
        if self.transformed {
            (v.clone() / 2.0).ln()
        } else {
            v.lift(0.0)
        }
    }

    fn in_domain(&self, v: &[f64]) -> bool {
        v[0] > 0.0
    }

    fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
        let mu = from[0].clone() * (theta[0] * dt);
        let d = to[0].clone() - from[0].clone() - mu.clone();
        (mu.ln() + LN_2PI + d.square() / mu) * 0.5
    }

    fn observation<R: Real>(&self, _theta: &[f64], obs: &Observation, x: &[R]) -> R {
        match obs.values[0] {
            Some(ys) => ((x[0].clone() - ys).square() / ys + (LN_2PI + ys.ln())) * 0.5,
            None => x[0].lift(0.0),
        }
    }
}

/// Stochastic SIR epidemic in `(S, I)` with latent `(2 sqrt(S), log I)` and lognormal data.
///
/// Parameters `(beta, gamma, sigma)`. New infections and recoveries over an interval are
/// normally approximated Poisson counts; `Delta I` is modelled given `Delta S`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sir;

impl Model for Sir {
    fn name(&self) -> &str {
        "sir"
    }

    fn dim(&self) -> usize {
        2
    }

    fn params(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::positive("beta"),
            ParamSpec::positive("gamma"),
            ParamSpec::positive("sigma"),
        ]
    }

    fn to_latent(&self, coord: usize, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Err(Error::Domain(format!("compartment sizes must be positive, got {x}")));
        }
        Ok(if coord == 0 { 2.0 * x.sqrt() } else { x.ln() })
    }

    fn from_latent<R: Real>(&self, coord: usize, v: &R) -> R {
        if coord == 0 {
            v.square() / 4.0
        } else {
            v.exp()
        }
    }

    fn log_jacobian<R: Real>(&self, coord: usize, v: &R) -> R {
        if coord == 0 {
            (v.clone() / 2.0).ln()
        } else {
            v.clone()
        }
    }

    fn in_domain(&self, v: &[f64]) -> bool {
        v[0] > 0.0 && v[1] < 700.0
    }

    fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
        let (beta, gamma) = (theta[0], theta[1]);
        let (s0, i0) = (&from[0], &from[1]);
        let mu_i = s0.clone() * i0.clone() * (beta * dt);
        let mu_r = i0.clone() * (gamma * dt);
        let ds = to[0].clone() - s0.clone();
        let di = to[1].clone() - i0.clone();
        let q_i = (ds.clone() + mu_i.clone()).square() / mu_i.clone();
        let q_r = (di + ds + mu_r.clone()).square() / mu_r.clone();
        (q_i + q_r + mu_i.ln() + mu_r.ln() + 2.0 * LN_2PI) * 0.5
    }

    fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R {
        let sigma = theta[2];
        let mut acc = x[0].lift(0.0);
        for (c, v) in obs.values.iter().enumerate() {
            if let Some(ys) = v {
                let r = x[c].ln() - ys.ln();
                acc = acc + r.square() / (2.0 * sigma * sigma)
                    + (0.5 * (LN_2PI + 2.0 * sigma.ln()) + ys.ln());
            }
        }
        acc
    }

    fn default_latent(&self, coord: usize) -> f64 {
        if coord == 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Second-order random walk on a logit with binomial data.
///
/// State `(x, u)` where `u` tracks `dx/dt` through a stiff penalty
/// `w/2 (u_i - (x_{i+1} - x_i)/dt)^2`, so the random-walk penalty
/// `1/2 (-log lambda + lambda (u_{i+1} - u_i)^2 / dt)` only couples neighbours.
/// Data: `-y x + n log(1 + e^x)`. Parameter `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rw2Binomial {
    pub penalty_weight: f64,
}

impl Default for Rw2Binomial {
    fn default() -> Self {
        Self { penalty_weight: 1e6 }
    }
}

impl Model for Rw2Binomial {
    fn name(&self) -> &str {
        "rw2_binomial"
    }

    fn dim(&self) -> usize {
        2
    }

    fn params(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::positive("lambda")]
    }

    fn to_latent(&self, _coord: usize, x: f64) -> Result<f64> {
        Ok(x)
    }

    fn from_latent<R: Real>(&self, _coord: usize, v: &R) -> R {
        v.clone()
    }

    fn log_jacobian<R: Real>(&self, _coord: usize, v: &R) -> R {
        v.lift(0.0)
    }

    fn in_domain(&self, _v: &[f64]) -> bool {
        true
    }

    fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
        let lambda = theta[0];
        let slope = (to[0].clone() - from[0].clone()) / dt;
        let stiff = (from[1].clone() - slope).square() * (0.5 * self.penalty_weight);
        let rw = (to[1].clone() - from[1].clone()).square() * (0.5 * lambda / dt);
        stiff + rw - 0.5 * lambda.ln()
    }

    fn observation<R: Real>(&self, _theta: &[f64], obs: &Observation, x: &[R]) -> R {
        match (obs.values[0], obs.trials) {
            (Some(y), Some(n)) => x[0].softplus() * n - x[0].clone() * y,
            _ => x[0].lift(0.0),
        }
    }

    fn observed_latent(&self, obs: &Observation, coord: usize) -> Option<f64> {
        if coord != 0 {
            return None;
        }
        let (y, n) = (obs.values[0]?, obs.trials?);
        let p = (y + 0.5) / (n + 1.0);
        Some((p / (1.0 - p)).ln())
    }

    fn check_observation(&self, obs: &Observation) -> Result<()> {
        if obs.values.len() != 2 {
            return Err(Error::Invalid("rw2_binomial observations have 2 slots".into()));
        }
        if obs.values[1].is_some() {
            return Err(Error::Invalid("the slope coordinate is never observed".into()));
        }
        match (obs.values[0], obs.trials) {
            (Some(y), Some(n)) if n > 0.0 && (0.0..=n).contains(&y) => Ok(()),
            (None, _) => Ok(()),
            _ => Err(Error::Invalid("binomial data need 0 <= y <= n and n > 0".into())),
        }
    }
}

/// Gaussian random walk observed with Gaussian noise; every local term is quadratic.
///
/// Parameters `(q, r)`: process standard deviation per unit time and measurement standard
/// deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinearGaussian;

impl Model for LinearGaussian {
    fn name(&self) -> &str {
        "linear_gaussian"
    }

    fn dim(&self) -> usize {
        1
    }

    fn params(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::positive("q"), ParamSpec::positive("r")]
    }

    fn to_latent(&self, _coord: usize, x: f64) -> Result<f64> {
        Ok(x)
    }

    fn from_latent<R: Real>(&self, _coord: usize, v: &R) -> R {
        v.clone()
    }

    fn log_jacobian<R: Real>(&self, _coord: usize, v: &R) -> R {
        v.lift(0.0)
    }

    fn in_domain(&self, _v: &[f64]) -> bool {
        true
    }

    fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
        let var = theta[0] * theta[0] * dt;
        (to[0].clone() - from[0].clone()).square() / (2.0 * var) + 0.5 * (LN_2PI + var.ln())
    }

    fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R {
        let var = theta[1] * theta[1];
        match obs.values[0] {
            Some(y) => (x[0].clone() - y).square() / (2.0 * var) + 0.5 * (LN_2PI + var.ln()),
            None => x[0].lift(0.0),
        }
    }
}

/// The built-in models behind one type, for configuration-driven callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinModel {
    PoissonGrowth(PoissonGrowth),
    Sir(Sir),
    Rw2Binomial(Rw2Binomial),
    LinearGaussian(LinearGaussian),
}

pub fn poisson_growth_model() -> BuiltinModel {
    BuiltinModel::PoissonGrowth(PoissonGrowth { transformed: true })
}

pub fn sir_model() -> BuiltinModel {
    BuiltinModel::Sir(Sir)
}

pub fn rw2_binomial_model(penalty_weight: f64) -> BuiltinModel {
    BuiltinModel::Rw2Binomial(Rw2Binomial { penalty_weight })
}

pub fn linear_gaussian_model() -> BuiltinModel {
    BuiltinModel::LinearGaussian(LinearGaussian)
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            BuiltinModel::PoissonGrowth($m) => $e,
            BuiltinModel::Sir($m) => $e,
            BuiltinModel::Rw2Binomial($m) => $e,
            BuiltinModel::LinearGaussian($m) => $e,
        }
    };
}

impl Model for BuiltinModel {
    fn name(&self) -> &str {
        dispatch!(self, m => m.name())
    }
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }
    fn params(&self) -> Vec<ParamSpec> {
        dispatch!(self, m => m.params())
    }
    fn to_latent(&self, coord: usize, x: f64) -> Result<f64> {
        dispatch!(self, m => m.to_latent(coord, x))
    }
    fn from_latent<R: Real>(&self, coord: usize, v: &R) -> R {
        dispatch!(self, m => m.from_latent(coord, v))
    }
    fn log_jacobian<R: Real>(&self, coord: usize, v: &R) -> R {
        dispatch!(self, m => m.log_jacobian(coord, v))
    }
    fn in_domain(&self, v: &[f64]) -> bool {
        dispatch!(self, m => m.in_domain(v))
    }
    fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
        dispatch!(self, m => m.transition(theta, dt, from, to))
    }
    fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R {
        dispatch!(self, m => m.observation(theta, obs, x))
    }
    fn observed_latent(&self, obs: &Observation, coord: usize) -> Option<f64> {
        dispatch!(self, m => m.observed_latent(obs, coord))
    }
    fn default_latent(&self, coord: usize) -> f64 {
        dispatch!(self, m => m.default_latent(coord))
    }
    fn check_observation(&self, obs: &Observation) -> Result<()> {
        dispatch!(self, m => m.check_observation(obs))
    }
}
