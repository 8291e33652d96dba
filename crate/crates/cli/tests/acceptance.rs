//! Acceptance suite: runs every criterion at its stated tolerance and prints one PASS/FAIL line
//! per criterion.
//!
//! The process exits with status 0 after reporting. Set `ACCEPTANCE_STRICT=1` to exit with
//! status 1 when any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slam_cli::data;
use slam_core::bench::bench_sizes;
use slam_core::estimation::{fit, refine_grid, FitOptions, FitProblem};
use slam_core::laplace_core::{expansion_terms, log_marginal, log_marginal_at, NewtonOptions, Order};
use slam_core::models::{
    rw2_binomial_model, sir_model, BuiltinModel, LinearGaussian, Model, Objective, Observation, Observations,
    PoissonGrowth, Rw2Binomial, Sir, TimeGrid,
};
use slam_core::oracle::{
    dense_fourth, dense_hessian, dense_terms, dense_third, derivative_check, integrate_log_m, random_bundle,
    transform_bundle, LocalPolynomialObjective,
};
use slam_core::sparse_tensors::LocalTensorBundle;

struct Outcome {
    pass: bool,
    detail: String,
}

fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn sparse_terms(bundle: &LocalTensorBundle) -> [f64; 3] {
    let (lm, _) = expansion_terms(0.0, bundle, Order::Higher).expect("positive definite Hessian");
    [lm.term_iv, lm.term_iiia, lm.term_iiib]
}

fn dense_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let p = rng.random_range(1..=3);
        let coefficients = random_bundle(n, p, &mut rng);
        let center: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = LocalPolynomialObjective::from_bundle(&coefficients, &center);
        let bundle = model.bundle(&center, 4).expect("consistent shapes");
        let d = dense_terms(&dense_hessian(&bundle), &dense_third(&bundle), &dense_fourth(&bundle))
            .expect("dense oracle");
        for (s, o) in sparse_terms(&bundle).iter().zip([d.iv, d.iiia, d.iiib]) {
            worst = worst.max(rel(*s, o));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-8 && secs < 60.0,
        detail: format!("200 instances, worst relative difference {worst:.2e} (limit 1e-8), {secs:.2} s"),
    }
}

fn integral_accuracy() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for c3 in [0.1, 0.3] {
        for c4 in [0.1, 0.2] {
            let poly = LocalPolynomialObjective::scalar(&[0.0, 0.0, 1.0, c3, c4]);
            let (lm, _) = log_marginal_at(&poly, &[0.0], Order::Higher, &NewtonOptions::default()).expect("converges");
            let h = DMatrix::from_element(1, 1, 1.0);
            let q = integrate_log_m(&|y: &[f64]| poly.value(y), &[0.0], &h, 12.0, 1e-12).expect("finite");
            let (et, eb) = ((lm.total - q.log_value).abs(), (lm.basic - q.log_value).abs());
            let ok = et < eb && et < 1e-3 && q.error < 1e-8;
            pass &= ok;
            parts.push(format!(
                "(c3={c3}, c4={c4}) |total-exact|={et:.2e} |basic-exact|={eb:.2e} quad err={:.1e}{}",
                q.error,
                if ok { "" } else { " [miss]" }
            ));
        }
    }
    Outcome {
        pass,
        detail: format!("{}; {:.2} s", parts.join("; "), start.elapsed().as_secs_f64()),
    }
}

/// `log M` of a Gaussian random walk with Gaussian data from the dense quadratic form.
fn gaussian_log_m(times: &[f64], data: &[Option<f64>], q: f64, r: f64) -> f64 {
    let n = times.len();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut c = 0.0;
    for i in 0..n - 1 {
        let var = q * q * (times[i + 1] - times[i]);
        a[(i, i)] += 1.0 / var;
        a[(i + 1, i + 1)] += 1.0 / var;
        a[(i, i + 1)] -= 1.0 / var;
        a[(i + 1, i)] -= 1.0 / var;
        c += 0.5 * (ln2pi + var.ln());
    }
    for (i, d) in data.iter().enumerate() {
        if let Some(d) = d {
            let var = r * r;
            a[(i, i)] += 1.0 / var;
            b[i] += d / var;
            c += d * d / (2.0 * var) + 0.5 * (ln2pi + var.ln());
        }
    }
    let chol = a.cholesky().expect("positive definite");
    let x = chol.solve(&b);
    let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
    -c + 0.5 * b.dot(&x) + 0.5 * n as f64 * ln2pi - 0.5 * log_det
}

fn quadratic_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0_f64;
    let mut nonzero = 0;
    for _ in 0..50 {
        let n = rng.random_range(3..40);
        let mut times = vec![0.0];
        for _ in 1..n {
            times.push(times.last().unwrap() + rng.random_range(0.1..2.0));
        }
        let mut values: Vec<Option<f64>> = (0..n)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(-3.0..3.0)))
            .collect();
        values[0] = Some(rng.random_range(-3.0..3.0));
        let (q, r) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let grid = TimeGrid::from_data_times(times.clone()).unwrap();
        let obs = Observations {
            points: values
                .iter()
                .map(|v| Observation {
                    values: vec![*v],
                    trials: None,
                })
                .collect(),
        };
        let (lm, _) = log_marginal(&LinearGaussian, &[q, r], &grid, &obs, Order::Higher, None).expect("converges");
        if lm.term_iv != 0.0 || lm.term_iiia != 0.0 || lm.term_iiib != 0.0 {
            nonzero += 1;
        }
        worst = worst.max(rel(lm.basic, gaussian_log_m(&times, &values, q, r)));
    }
    Outcome {
        pass: nonzero == 0 && worst <= 1e-10,
        detail: format!("50 instances, {nonzero} with nonzero corrections, worst relative error of basic {worst:.2e} (limit 1e-10)"),
    }
}

fn load(name: &str, model: &BuiltinModel) -> (TimeGrid, Observations) {
    data::load(&data_file(name), model).expect("bundled data")
}

fn sir_reproduction() -> Outcome {
    let start = Instant::now();
    let model = sir_model();
    let (grid, obs) = load("boarding_school.csv", &model);
    let mut parts = Vec::new();
    let mut any = false;
    for k in [1, 2, 4] {
        let mut ok_k = true;
        for (order, sigma_ref) in [(Order::Basic, 0.175), (Order::Higher, 0.176)] {
            let problem = FitProblem::new(model, grid.clone(), obs.clone(), vec![2.18e-3, 0.44, 0.1], k, order);
            match fit(&problem, &FitOptions::default()) {
                Ok(r) => {
                    let t = &r.theta;
                    let ok = rel(t[0], 2.47e-3) <= 0.05 && rel(t[1], 0.519) <= 0.05 && rel(t[2], sigma_ref) <= 0.15;
                    ok_k &= ok;
                    parts.push(format!(
                        "k={k} {order:?}: beta={:.3e} ({:+.1}%) gamma={:.3} ({:+.1}%) sigma={:.3} ({:+.1}%)",
                        t[0],
                        100.0 * (t[0] / 2.47e-3 - 1.0),
                        t[1],
                        100.0 * (t[1] / 0.519 - 1.0),
                        t[2],
                        100.0 * (t[2] / sigma_ref - 1.0)
                    ));
                }
                Err(e) => {
                    ok_k = false;
                    parts.push(format!("k={k} {order:?}: {e}"));
                }
            }
        }
        any |= ok_k;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: any && secs < 60.0,
        detail: format!("{}; {secs:.1} s", parts.join("; ")),
    }
}

fn transformation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let p = rng.random_range(1..=3);
        let bundle = random_bundle(n, p, &mut rng);
        let blocks: Vec<DMatrix<f64>> = (0..n)
            .map(|_| DMatrix::from_fn(p, p, |_, _| rng.random_range(-0.5..0.5)) + DMatrix::identity(p, p) * 1.5)
            .collect();
        let before = sparse_terms(&bundle);
        let after = sparse_terms(&transform_bundle(&bundle, &blocks));
        for (a, b) in after.iter().zip(before) {
            worst = worst.max(rel(*a, b));
        }
    }
    Outcome {
        pass: worst <= 1e-8,
        detail: format!("50 instances, worst relative change {worst:.2e} (limit 1e-8)"),
    }
}

fn linear_scaling() -> Outcome {
    let rows = bench_sizes(&[1 << 10, 1 << 11, 1 << 12], 3, 7, 606).expect("bench runs");
    let stage = |r: &slam_core::bench::BenchRow| r.t_factor + r.t_s + r.t_iv + r.t_iiia + r.t_iiib;
    let ratios: Vec<f64> = rows.windows(2).map(|w| stage(&w[1]) / stage(&w[0])).collect();
    let pass = ratios.iter().all(|r| (1.4..=3.0).contains(r));
    let times: Vec<String> = rows.iter().map(|r| format!("n={} {:.2} ms", r.n, 1e3 * stage(r))).collect();
    Outcome {
        pass,
        detail: format!(
            "p=3: {}; doubling ratios {} (limits [1.4, 3.0])",
            times.join(", "),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn conservation(penalty_weight: f64) -> Result<(f64, f64, f64), String> {
    let model = rw2_binomial_model(penalty_weight);
    let (grid, obs) = load("tokyo_rain_synthetic.csv", &model);
    let problem = FitProblem::new(model, grid, obs.clone(), vec![10.0], 0, Order::Higher);
    let r = fit(&problem, &FitOptions::default()).map_err(|e| e.to_string())?;
    let mut expected = 0.0;
    let mut observed = 0.0;
    for (row, o) in r.path.iter().zip(&obs.points) {
        let n = o.trials.unwrap_or(0.0);
        expected += n / (1.0 + (-row[0]).exp());
        observed += o.values[0].unwrap_or(0.0);
    }
    Ok((expected, observed, r.theta[0]))
}

fn tokyo_conservation() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = false;
    for w in [1e6, 1e5, 1e7] {
        match conservation(w) {
            Ok((e, o, lambda)) => {
                let ok = rel(e, o) < 5e-5;
                if w == 1e6 {
                    pass = ok;
                }
                parts.push(format!("w={w:.0e}: sum n p = {e:.6} vs sum y = {o} (lambda = {lambda:.4e})"));
            }
            Err(e) => parts.push(format!("w={w:.0e}: {e}")),
        }
    }
    Outcome {
        pass,
        detail: format!("synthetic stand-in for the Tokyo series; {}", parts.join("; ")),
    }
}

fn path_at(model: PoissonGrowth, grid: &TimeGrid, obs: &Observations, k: usize) -> Result<Vec<f64>, String> {
    let fine = refine_grid(grid, k);
    let (_, path) = log_marginal(&model, &[0.35], &fine, obs, Order::Basic, None).map_err(|e| e.to_string())?;
    let objective = Objective::new(&model, &[0.35], &fine, obs).map_err(|e| e.to_string())?;
    Ok(objective.to_original(&path.yhat))
}

fn variance_stabilization() -> Outcome {
    let (grid, obs) = load("poisson_growth.csv", &BuiltinModel::PoissonGrowth(PoissonGrowth { transformed: true }));
    let ks = [1, 2, 4, 8];
    let mut minima = Vec::new();
    let mut stable_move = 0.0_f64;
    let mut errors = Vec::new();
    let mut reference: Option<Vec<f64>> = None;
    for k in ks {
        match path_at(PoissonGrowth { transformed: false }, &grid, &obs, k) {
            Ok(y) => minima.push(y[1..y.len() - 1].iter().copied().fold(f64::INFINITY, f64::min)),
            Err(e) => errors.push(format!("untransformed k={k}: {e}")),
        }
        match path_at(PoissonGrowth { transformed: true }, &grid, &obs, k) {
            Ok(y) => {
                let fine = refine_grid(&grid, k);
                let at_data: Vec<f64> = fine.data_idx().iter().map(|&i| y[i]).collect();
                match &reference {
                    None => reference = Some(at_data),
                    Some(r) => {
                        for (a, b) in at_data.iter().zip(r) {
                            stable_move = stable_move.max(rel(*a, *b));
                        }
                    }
                }
            }
            Err(e) => errors.push(format!("transformed k={k}: {e}")),
        }
    }
    let decreasing = minima.len() == ks.len() && minima.windows(2).all(|w| w[1] < w[0]);
    Outcome {
        pass: errors.is_empty() && decreasing && stable_move < 0.02,
        detail: format!(
            "untransformed interior minimum over k=1,2,4,8: {}; stabilized data-point values move at most {:.2}% {}",
            minima.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" > "),
            100.0 * stable_move,
            errors.join("; ")
        ),
    }
}

fn check_model<M: Model>(model: &M, rng: &mut ChaCha8Rng, theta: &[f64], obs: Observation, point: impl Fn(&mut ChaCha8Rng) -> Vec<f64>) -> f64 {
    let grid = TimeGrid::new(vec![0.0, rng.random_range(0.2..1.5)], vec![0]).unwrap();
    let data = Observations { points: vec![obs] };
    let objective = Objective::new(model, theta, &grid, &data).expect("valid model setup");
    let p = model.dim();
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let v = point(rng);
        worst = worst.max(derivative_check(
            |x| objective.interval_value(0, x),
            |x, k| objective.interval_derivs(0, x, k),
            &v,
        ));
        worst = worst.max(derivative_check(
            |x| objective.node_value(0, x),
            |x, k| objective.node_derivs(0, x, k),
            &v[..p],
        ));
    }
    worst
}

fn derivative_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut parts = Vec::new();
    let mut pass = true;
    let mut record = |name: &str, err: f64| {
        pass &= err < 1e-5;
        parts.push(format!("{name} {err:.1e}"));
    };
    let e = check_model(&PoissonGrowth { transformed: true }, &mut rng, &[0.6], Observation::full(&[7.0]), |r| {
        vec![r.random_range(2.0..8.0), r.random_range(2.0..8.0)]
    });
    record("poisson_growth", e);
    let e = check_model(&PoissonGrowth { transformed: false }, &mut rng, &[0.6], Observation::full(&[7.0]), |r| {
        vec![r.random_range(2.0..12.0), r.random_range(2.0..12.0)]
    });
    record("poisson_growth_untransformed", e);
    let e = check_model(&Sir, &mut rng, &[2.3e-3, 0.5, 0.18], Observation::full(&[600.0, 40.0]), |r| {
        vec![r.random_range(25.0..55.0), r.random_range(0.0..5.5), r.random_range(25.0..55.0), r.random_range(0.0..5.5)]
    });
    record("sir", e);
    let obs = Observation {
        values: vec![Some(1.0), None],
        trials: Some(2.0),
    };
    let e = check_model(&Rw2Binomial::default(), &mut rng, &[20.0], obs, |r| {
        let x0 = r.random_range(-2.0..2.0);
        vec![x0, r.random_range(-0.5..0.5), x0 + r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)]
    });
    record("rw2_binomial", e);
    let e = check_model(&LinearGaussian, &mut rng, &[0.7, 0.4], Observation::full(&[0.3]), |r| {
        vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]
    });
    record("linear_gaussian", e);
    Outcome {
        pass,
        detail: format!("worst relative error over orders 1-4 at 20 points: {} (limit 1e-5)", parts.join(", ")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("dense-oracle equivalence", dense_oracle_equivalence),
        ("integral accuracy on the cubic/quartic family", integral_accuracy),
        ("quadratic exactness", quadratic_exactness),
        ("SIR boarding-school reproduction", sir_reproduction),
        ("linear-transformation invariance", transformation_invariance),
        ("linear-time scaling", linear_scaling),
        ("binomial RW2 conservation", tokyo_conservation),
        ("variance-stabilization artifact", variance_stabilization),
        ("derivative consistency", derivative_consistency),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {} {}: {} | {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
