//! Outer maximization of `log M(theta)` by a Nelder–Mead simplex in log-parameter space, and
//! time-grid refinement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::laplace_core::{log_marginal_at, LogMarginal, NewtonOptions, Order};
use crate::models::{Model, Objective, Observations, TimeGrid};

/// Inserts `k` equally spaced points into every gap of the grid; data indices are remapped.
pub fn refine_grid(grid: &TimeGrid, k: usize) -> TimeGrid {
    if k == 0 {
        return grid.clone();
    }
    let old = grid.times();
    let mut times = Vec::with_capacity((old.len() - 1) * (k + 1) + 1);
    for w in old.windows(2) {
        for j in 0..=k {
            times.push(w[0] + (w[1] - w[0]) * j as f64 / (k + 1) as f64);
        }
    }
    times.push(*old.last().expect("grid is non-empty"));
    let data_idx = grid.data_idx().iter().map(|i| i * (k + 1)).collect();
    TimeGrid::new(times, data_idx).expect("refinement keeps the grid valid")
}

/// Simplex controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Stop a simplex run when its diameter in search coordinates falls below this.
    pub diameter_tol: f64,
    /// Evaluation budget per simplex run.
    pub max_evaluations: usize,
    /// Simplex runs started from the perturbed best point after the first.
    pub restarts: usize,
    /// Initial simplex edge in search coordinates.
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            diameter_tol: 1e-6,
            max_evaluations: 500,
            restarts: 2,
            initial_step: 0.1,
            seed: 0,
        }
    }
}

/// Everything needed to maximize `log M(theta)`.
#[derive(Debug, Clone)]
pub struct FitProblem<M: Model> {
    pub model: M,
    /// Grid before refinement.
    pub grid: TimeGrid,
    pub obs: Observations,
    pub theta0: Vec<f64>,
    /// Parameters searched over; the others stay at `theta0`.
    pub free: Vec<bool>,
    /// In-between points per grid gap.
    pub refinement: usize,
    pub order: Order,
}

impl<M: Model> FitProblem<M> {
    /// Problem with every parameter free.
    pub fn new(model: M, grid: TimeGrid, obs: Observations, theta0: Vec<f64>, refinement: usize, order: Order) -> Self {
        let free = vec![true; theta0.len()];
        Self {
            model,
            grid,
            obs,
            theta0,
            free,
            refinement,
            order,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.check_theta(&self.theta0)?;
        if self.free.len() != self.theta0.len() {
            return Err(Error::Invalid("free flags do not match the parameter count".into()));
        }
        if self.obs.points.len() != self.grid.data_idx().len() {
            return Err(Error::Invalid(format!(
                "{} observations for {} data times",
                self.obs.points.len(),
                self.grid.data_idx().len()
            )));
        }
        for o in &self.obs.points {
            self.model.check_observation(o)?;
        }
        Ok(())
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub evaluation: usize,
    pub theta: Vec<f64>,
    /// `None` when the evaluation failed.
    pub log_m: Option<f64>,
    pub best_so_far: f64,
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub log_marginal: LogMarginal,
    /// Refined grid times.
    pub times: Vec<f64>,
    /// Critical path at `theta` in original coordinates, `times.len()` rows of `p` values.
    pub path: Vec<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    /// Evaluations that failed, with their error.
    pub failures: Vec<Error>,
    pub wall_time: f64,
}

/// Map between model parameters and unconstrained search coordinates.
struct Search<'a> {
    theta0: &'a [f64],
    free: Vec<usize>,
    logged: Vec<bool>,
}

impl Search<'_> {
    fn to_search(&self, theta: &[f64]) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| if self.logged[i] { theta[i].ln() } else { theta[i] })
            .collect()
    }

    fn to_theta(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.theta0.to_vec();
        for (&i, &v) in self.free.iter().zip(x) {
            // the starting coordinate maps back to the exact starting value
            if self.logged[i] && v != self.theta0[i].ln() {
                theta[i] = v.exp();
            } else if !self.logged[i] {
                theta[i] = v;
            }
        }
        theta
    }
}

struct Best {
    log_m: f64,
    theta: Vec<f64>,
    lm: LogMarginal,
    yhat: Vec<f64>,
}

struct Evaluator<'a, M: Model> {
    problem: &'a FitProblem<M>,
    grid: TimeGrid,
    trace: Vec<TraceEntry>,
    failures: Vec<Error>,
    best: Option<Best>,
}

impl<M: Model> Evaluator<'_, M> {
    fn log_m(&self, theta: &[f64]) -> Result<(LogMarginal, Vec<f64>)> {
        let obj = Objective::new(&self.problem.model, theta, &self.grid, &self.problem.obs)?;
        let opts = NewtonOptions::default();
        // warm start from the best path so far, falling back to the interpolated data
        if let Some(b) = &self.best {
            if let Ok((lm, path)) = log_marginal_at(&obj, &b.yhat, self.problem.order, &opts) {
                return Ok((lm, path.yhat));
            }
        }
        let (lm, path) = log_marginal_at(&obj, &obj.initial_path(), self.problem.order, &opts)?;
        Ok((lm, path.yhat))
    }

    /// Negative `log M`, `+inf` on failure.
    fn evaluate(&mut self, theta: Vec<f64>) -> f64 {
        let outcome = self
            .problem
            .model
            .check_theta(&theta)
            .and_then(|_| self.log_m(&theta))
            .and_then(|(lm, y)| if lm.total.is_finite() { Ok((lm, y)) } else { Err(Error::NonFinite) });
        let log_m = match outcome {
            Ok((lm, yhat)) => {
                if self.best.as_ref().is_none_or(|b| lm.total > b.log_m) {
                    self.best = Some(Best {
                        log_m: lm.total,
                        theta: theta.clone(),
                        lm,
                        yhat,
                    });
                }
                Some(lm.total)
            }
            Err(e) => {
                self.failures.push(Error::ObjectiveFailure {
                    theta: theta.clone(),
                    reason: e.to_string(),
                });
                None
            }
        };
        let best_so_far = self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.log_m);
        self.trace.push(TraceEntry {
            evaluation: self.trace.len(),
            theta,
            log_m,
            best_so_far,
        });
        log_m.map_or(f64::INFINITY, |v| -v)
    }
}

fn diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let x0 = &simplex[0].0;
    simplex[1..]
        .iter()
        .flat_map(|(x, _)| x.iter().zip(x0).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

/// Minimizes `f` from the given initial simplex with the standard reflection, expansion,
/// contraction and shrink steps.
fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: Vec<Vec<f64>>,
    tol: f64,
    max_evaluations: usize,
) -> Vec<f64> {
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = start
        .into_iter()
        .map(|x| {
            let v = eval(&x, &mut evals);
            (x, v)
        })
        .collect();
    let d = simplex.len() - 1;
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    sort(&mut simplex);
    while evals < max_evaluations && diameter(&simplex) >= tol {
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(x, _)| x[k]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    let v = eval(&x, &mut evals);
                    *vertex = (x, v);
                }
            }
        }
        sort(&mut simplex);
    }
    simplex.swap_remove(0).0
}

/// Maximizes `log M(theta)` of the requested order over the free parameters.
///
/// Positive parameters are searched on the log scale. Failed evaluations count as `-inf` and
/// are recorded; [`Error::AllFailed`] is returned only if none succeeded.
pub fn fit<M: Model>(problem: &FitProblem<M>, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    problem.validate()?;
    let specs = problem.model.params();
    let logged: Vec<bool> = specs.iter().map(|s| s.lower == 0.0 && s.upper == f64::INFINITY).collect();
    let free: Vec<usize> = (0..specs.len()).filter(|&i| problem.free[i]).collect();
    let search = Search {
        theta0: &problem.theta0,
        free,
        logged,
    };
    let mut ev = Evaluator {
        problem,
        grid: refine_grid(&problem.grid, problem.refinement),
        trace: Vec::new(),
        failures: Vec::new(),
        best: None,
    };

    let d = search.free.len();
    let x0 = search.to_search(&problem.theta0);
    if d == 0 {
        ev.evaluate(problem.theta0.clone());
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut f = |x: &[f64]| {
            let theta = search.to_theta(x);
            ev.evaluate(theta)
        };
        let mut simplex = vec![x0.clone()];
        for k in 0..d {
            let mut x = x0.clone();
            x[k] += opts.initial_step;
            simplex.push(x);
        }
        let mut best_x = nelder_mead(&mut f, simplex, opts.diameter_tol, opts.max_evaluations);
        for _ in 0..opts.restarts {
            let mut simplex = vec![best_x.clone()];
            for k in 0..d {
                let mut x = best_x.clone();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                x[k] += sign * opts.initial_step * rng.random_range(0.5..1.5);
                simplex.push(x);
            }
            best_x = nelder_mead(&mut f, simplex, opts.diameter_tol, opts.max_evaluations);
        }
    }

    let best = ev.best.ok_or(Error::AllFailed)?;
    let obj = Objective::new(&problem.model, &best.theta, &ev.grid, &problem.obs)?;
    let p = obj.p();
    let path = obj.to_original(&best.yhat).chunks(p).map(<[f64]>::to_vec).collect();
    Ok(FitResult {
        theta: best.theta,
        log_marginal: best.lm,
        times: ev.grid.times().to_vec(),
        path,
        trace: ev.trace,
        failures: ev.failures,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Real;
    use crate::models::{LinearGaussian, Observation, ParamSpec, PoissonGrowth};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn refine_grid_examples() {
        let g = TimeGrid::from_data_times(vec![0.0, 1.0]).unwrap();
        assert_eq!(refine_grid(&g, 0), g);
        let r = refine_grid(&g, 3);
        assert_eq!(r.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(r.data_idx(), &[0, 4]);
        let g = TimeGrid::from_data_times(vec![0.0, 1.0, 3.0]).unwrap();
        let r = refine_grid(&g, 1);
        assert_eq!(r.times(), &[0.0, 0.5, 1.0, 2.0, 3.0]);
        assert_eq!(r.data_idx(), &[0, 2, 4]);
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let mut f = |x: &[f64]| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
        let x = nelder_mead(&mut f, vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1]], 1e-9, 2000);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(x[1], -2.0, epsilon = 1e-6);
    }

    /// Random walk with process sd `rho s` and measurement sd `s`; only `s` is estimated.
    #[derive(Debug, Clone, Copy)]
    struct ScaledWalk {
        rho: f64,
    }

    impl Model for ScaledWalk {
        fn name(&self) -> &str {
            "scaled_walk"
        }
        fn dim(&self) -> usize {
            1
        }
        fn params(&self) -> Vec<ParamSpec> {
            vec![ParamSpec::positive("s")]
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
            LinearGaussian.transition(&[self.rho * theta[0], theta[0]], dt, from, to)
        }
        fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R {
            LinearGaussian.observation(&[self.rho * theta[0], theta[0]], obs, x)
        }
    }

    /// Minimum over paths of the scale-free residual `sum dy^2/(2 rho^2 dt) + sum (y - d)^2/2`.
    fn min_residual(times: &[f64], data: &[f64], rho: f64) -> f64 {
        let n = times.len();
        let mut a = DMatrix::<f64>::identity(n, n);
        let b = DVector::from_column_slice(data);
        for i in 0..n - 1 {
            let w = 1.0 / (rho * rho * (times[i + 1] - times[i]));
            a[(i, i)] += w;
            a[(i + 1, i + 1)] += w;
            a[(i, i + 1)] -= w;
            a[(i + 1, i)] -= w;
        }
        let y = a.clone().lu().solve(&b).unwrap();
        let mut r = 0.0;
        for i in 0..n - 1 {
            r += (y[i + 1] - y[i]).powi(2) / (2.0 * rho * rho * (times[i + 1] - times[i]));
        }
        r + (0..n).map(|i| (y[i] - data[i]).powi(2) / 2.0).sum::<f64>()
    }

    #[test]
    fn recovers_closed_form_scale() {
        // log M(s) = -R/s^2 - (m - 1) log s + const, maximized at s^2 = 2 R / (m - 1)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 25;
        let times: Vec<f64> = (0..m).map(|i| i as f64 * 0.5).collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = 0.0;
        let data: Vec<f64> = times
            .iter()
            .map(|_| {
                x += 0.3 * normal.sample(&mut rng);
                x + 0.5 * normal.sample(&mut rng)
            })
            .collect();
        let rho = 0.6;
        let expected = (2.0 * min_residual(&times, &data, rho) / (m as f64 - 1.0)).sqrt();
        let problem = FitProblem::new(
            ScaledWalk { rho },
            TimeGrid::from_data_times(times).unwrap(),
            Observations {
                points: data.iter().map(|&d| Observation::full(&[d])).collect(),
            },
            vec![1.0],
            0,
            Order::Higher,
        );
        let res = fit(&problem, &FitOptions::default()).unwrap();
        assert_relative_eq!(res.theta[0], expected, max_relative = 1e-4);
        assert!(res.failures.is_empty());
    }

    fn poisson_series(seed: u64) -> (TimeGrid, Observations) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = 5.0_f64;
        let mut points = Vec::new();
        let mut times = Vec::new();
        for i in 0..8 {
            times.push(i as f64);
            points.push(Observation::full(&[y.round().max(1.0)]));
            let mu = 0.4 * y;
            y = (y + mu + mu.sqrt() * Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).max(1.0);
        }
        (TimeGrid::from_data_times(times).unwrap(), Observations { points })
    }

    #[test]
    fn trace_is_monotone_and_improves_on_start() {
        let (grid, obs) = poisson_series(1);
        let problem = FitProblem::new(PoissonGrowth { transformed: true }, grid, obs, vec![0.2], 1, Order::Higher);
        let res = fit(&problem, &FitOptions::default()).unwrap();
        assert!(res.trace.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
        assert!(res.log_marginal.total >= res.trace[0].log_m.unwrap() - 1e-9);
        assert_eq!(res.path.len(), res.times.len());
        assert!(res.trace.len() <= 3 * 500 + 10);
    }

    #[test]
    fn unit_rescaling_leaves_estimate_unchanged() {
        #[derive(Debug, Clone, Copy)]
        struct Rescaled(f64);
        impl Model for Rescaled {
            fn name(&self) -> &str {
                "rescaled"
            }
            fn dim(&self) -> usize {
                1
            }
            fn params(&self) -> Vec<ParamSpec> {
                vec![ParamSpec::positive("r")]
            }
            fn to_latent(&self, c: usize, x: f64) -> Result<f64> {
                PoissonGrowth { transformed: true }.to_latent(c, x)
            }
            fn from_latent<R: Real>(&self, c: usize, v: &R) -> R {
                PoissonGrowth { transformed: true }.from_latent(c, v)
            }
            fn log_jacobian<R: Real>(&self, c: usize, v: &R) -> R {
                PoissonGrowth { transformed: true }.log_jacobian(c, v)
            }
            fn in_domain(&self, v: &[f64]) -> bool {
                PoissonGrowth { transformed: true }.in_domain(v)
            }
            fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
                PoissonGrowth { transformed: true }.transition(&[theta[0] * self.0], dt, from, to)
            }
            fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R {
                PoissonGrowth { transformed: true }.observation(&[theta[0] * self.0], obs, x)
            }
        }
        let (grid, obs) = poisson_series(2);
        let base = fit(
            &FitProblem::new(Rescaled(1.0), grid.clone(), obs.clone(), vec![0.3], 0, Order::Basic),
            &FitOptions::default(),
        )
        .unwrap();
        let scaled = fit(
            &FitProblem::new(Rescaled(1e-3), grid, obs, vec![300.0], 0, Order::Basic),
            &FitOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(base.theta[0], scaled.theta[0] * 1e-3, max_relative = 1e-5);
    }

    #[test]
    fn refinement_moves_stabilized_estimate_little() {
        let (grid, obs) = poisson_series(4);
        let at = |k| {
            let problem = FitProblem::new(PoissonGrowth { transformed: true }, grid.clone(), obs.clone(), vec![0.3], k, Order::Higher);
            fit(&problem, &FitOptions::default()).unwrap().theta[0]
        };
        let (a, b) = (at(4), at(8));
        assert!(((a - b) / a).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn invalid_start_and_total_failure() {
        let grid = TimeGrid::from_data_times(vec![0.0, 1.0]).unwrap();
        let obs = Observations {
            points: vec![Observation::full(&[3.0]), Observation::full(&[4.0])],
        };
        let problem = FitProblem::new(LinearGaussian, grid, obs, vec![1.0, 1.0], 0, Order::Basic);
        let res = fit(&problem, &FitOptions::default()).unwrap();
        assert!(res.log_marginal.total.is_finite());

        let mut bad = problem.clone();
        bad.theta0 = vec![-1.0, 1.0];
        assert!(matches!(fit(&bad, &FitOptions::default()), Err(Error::Invalid(_))));

        #[derive(Debug, Clone, Copy)]
        struct Nowhere;
        impl Model for Nowhere {
            fn name(&self) -> &str {
                "nowhere"
            }
            fn dim(&self) -> usize {
                1
            }
            fn params(&self) -> Vec<ParamSpec> {
                LinearGaussian.params()
            }
            fn to_latent(&self, c: usize, x: f64) -> Result<f64> {
                LinearGaussian.to_latent(c, x)
            }
            fn from_latent<R: Real>(&self, c: usize, v: &R) -> R {
                LinearGaussian.from_latent(c, v)
            }
            fn log_jacobian<R: Real>(&self, c: usize, v: &R) -> R {
                LinearGaussian.log_jacobian(c, v)
            }
            fn in_domain(&self, _v: &[f64]) -> bool {
                false
            }
            fn transition<R: Real>(&self, theta: &[f64], dt: f64, from: &[R], to: &[R]) -> R {
                LinearGaussian.transition(theta, dt, from, to)
            }
            fn observation<R: Real>(&self, theta: &[f64], obs: &Observation, x: &[R]) -> R {
                LinearGaussian.observation(theta, obs, x)
            }
        }
        let none = FitProblem::new(Nowhere, problem.grid.clone(), problem.obs.clone(), vec![1.0, 1.0], 0, Order::Basic);
        assert_eq!(fit(&none, &FitOptions::default()), Err(Error::AllFailed));
    }

    #[test]
    fn fixed_parameters_stay_fixed() {
        let (grid, obs) = poisson_series(5);
        let mut problem = FitProblem::new(LinearGaussian, grid, obs, vec![1.0, 0.5], 0, Order::Basic);
        problem.free = vec![true, false];
        let res = fit(&problem, &FitOptions::default()).unwrap();
        assert_eq!(res.theta[1], 0.5);
        assert!(res.trace.iter().all(|t| t.theta[1] == 0.5));
    }
}
