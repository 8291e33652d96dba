//! The `fit`, `eval` and `bench` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use slam_core::bench::{bench_sizes, BenchRow};
use slam_core::estimation::{fit, FitOptions, FitProblem, FitResult};
use slam_core::laplace_core::{log_marginal, LogMarginal, Order};
use slam_core::models::Model;
use slam_core::Error;

use crate::config::RunConfig;
use crate::data::{self, path_columns};
use crate::CliError;

/// Fixed-width scientific notation with 17 significant digits.
pub fn full(v: f64) -> String {
    format!("{v:.16e}")
}

fn order_name(o: Order) -> &'static str {
    match o {
        Order::Basic => "basic",
        Order::Higher => "higher",
    }
}

#[derive(Debug, Serialize)]
struct Terms {
    basic: f64,
    term_iv: f64,
    term_iiia: f64,
    term_iiib: f64,
    total: f64,
}

impl From<&LogMarginal> for Terms {
    fn from(lm: &LogMarginal) -> Self {
        Self {
            basic: lm.basic,
            term_iv: lm.term_iv,
            term_iiia: lm.term_iiia,
            term_iiib: lm.term_iiib,
            total: lm.total,
        }
    }
}

#[derive(Debug, Serialize)]
struct FitSummary {
    order: &'static str,
    theta: BTreeMap<String, f64>,
    /// Expansion at the estimate with all terms, whichever order was maximized.
    log_m: Option<Terms>,
    log_m_maximized: f64,
    evaluations: usize,
    failed_evaluations: usize,
}

#[derive(Debug, Serialize)]
struct Estimates {
    model: String,
    parameters: Vec<&'static str>,
    fixed: Vec<String>,
    refinement: usize,
    seed: u64,
    grid_points: usize,
    fits: Vec<FitSummary>,
}

#[derive(Debug, Serialize)]
struct Timing {
    order: &'static str,
    wall_time_s: f64,
}

/// Files produced by a fit, rendered in memory before anything is written.
#[derive(Debug, Clone, PartialEq)]
pub struct FitArtifacts {
    pub estimates_json: String,
    pub critical_path_csv: String,
    pub trace_csv: String,
    pub timing_json: String,
}

fn write_outputs(dir: &Path, files: &[(&str, &str)]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

/// Runs every requested fit and renders the artifacts.
pub fn run_fit(cfg: &RunConfig) -> Result<FitArtifacts, CliError> {
    let model = cfg.builtin_model()?;
    let theta0 = cfg.checked_theta(&model)?;
    let free = cfg.free_flags(&model)?;
    let (grid, obs) = data::load(cfg.data_path()?, &model)?;
    let names: Vec<&'static str> = model.params().iter().map(|p| p.name).collect();
    let opts = FitOptions {
        max_evaluations: cfg.max_evaluations,
        restarts: cfg.restarts,
        seed: cfg.seed,
        ..FitOptions::default()
    };

    let mut results: Vec<(Order, FitResult)> = Vec::new();
    for order in cfg.orders.list() {
        let mut problem = FitProblem::new(model, grid.clone(), obs.clone(), theta0.clone(), cfg.refinement, order);
        problem.free = free.clone();
        let res = fit(&problem, &opts).map_err(|e| match e {
            Error::AllFailed => CliError::Optimization(format!(
                "no parameter vector could be evaluated, starting from theta = {theta0:?}"
            )),
            other => CliError::Optimization(other.to_string()),
        })?;
        results.push((order, res));
    }

    let fine = slam_core::estimation::refine_grid(&grid, cfg.refinement);
    let mut fits = Vec::new();
    let mut timing = Vec::new();
    let mut path_csv = String::from("order,t");
    let mut trace_csv = String::from("order,evaluation");
    for c in path_columns(&model) {
        write!(path_csv, ",{c}").unwrap();
    }
    for n in &names {
        write!(trace_csv, ",{n}").unwrap();
    }
    path_csv.push('\n');
    trace_csv.push_str(",log_m,best_so_far\n");

    for (order, res) in &results {
        let oname = order_name(*order);
        // the full expansion at the estimate, reusing the path as a starting point
        let latent: Vec<f64> = res
            .path
            .iter()
            .flat_map(|row| row.iter().enumerate().map(|(c, &x)| model.to_latent(c, x).unwrap_or(x)))
            .collect();
        let all_terms = log_marginal(&model, &res.theta, &fine, &obs, Order::Higher, Some(&latent))
            .ok()
            .map(|(lm, _)| Terms::from(&lm));
        fits.push(FitSummary {
            order: oname,
            theta: names.iter().map(|n| n.to_string()).zip(res.theta.iter().copied()).collect(),
            log_m: all_terms,
            log_m_maximized: res.log_marginal.total,
            evaluations: res.trace.len(),
            failed_evaluations: res.failures.len(),
        });
        timing.push(Timing {
            order: oname,
            wall_time_s: res.wall_time,
        });
        for (t, row) in res.times.iter().zip(&res.path) {
            write!(path_csv, "{oname},{}", full(*t)).unwrap();
            for v in row {
                write!(path_csv, ",{}", full(*v)).unwrap();
            }
            path_csv.push('\n');
        }
        for e in &res.trace {
            write!(trace_csv, "{oname},{}", e.evaluation).unwrap();
            for v in &e.theta {
                write!(trace_csv, ",{}", full(*v)).unwrap();
            }
            let lm = e.log_m.map(full).unwrap_or_default();
            writeln!(trace_csv, ",{lm},{}", full(e.best_so_far)).unwrap();
        }
    }

    let estimates = Estimates {
        model: model.name().to_string(),
        parameters: names,
        fixed: cfg.fixed.clone(),
        refinement: cfg.refinement,
        seed: cfg.seed,
        grid_points: fine.n(),
        fits,
    };
    Ok(FitArtifacts {
        estimates_json: serde_json::to_string_pretty(&estimates).expect("serializable") + "\n",
        critical_path_csv: path_csv,
        trace_csv,
        timing_json: serde_json::to_string_pretty(&timing).expect("serializable") + "\n",
    })
}

/// `slam fit`: writes the artifacts into the output directory.
pub fn cmd_fit(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let a = run_fit(cfg)?;
    write_outputs(
        &cfg.out,
        &[
            ("estimates.json", &a.estimates_json),
            ("critical_path.csv", &a.critical_path_csv),
            ("trace.csv", &a.trace_csv),
            ("timing.json", &a.timing_json),
        ],
    )?;
    Ok(cfg.out.clone())
}

/// `slam eval`: the expansion at the configured parameters, one `name = value` line per term.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let model = cfg.builtin_model()?;
    let theta = cfg.checked_theta(&model)?;
    let (grid, obs) = data::load(cfg.data_path()?, &model)?;
    let fine = slam_core::estimation::refine_grid(&grid, cfg.refinement);
    let order = if cfg.orders.list().contains(&Order::Higher) {
        Order::Higher
    } else {
        Order::Basic
    };
    let (lm, path) = log_marginal(&model, &theta, &fine, &obs, order, None)
        .map_err(|e| CliError::Optimization(format!("evaluation failed at theta = {theta:?}: {e}")))?;
    let mut out = String::new();
    writeln!(out, "model = {}", model.name()).unwrap();
    writeln!(out, "theta = {}", theta.iter().map(|v| full(*v)).collect::<Vec<_>>().join(",")).unwrap();
    writeln!(out, "grid_points = {}", fine.n()).unwrap();
    writeln!(out, "newton_iterations = {}", path.iterations).unwrap();
    for (k, v) in [
        ("basic", lm.basic),
        ("term_iv", lm.term_iv),
        ("term_iiia", lm.term_iiia),
        ("term_iiib", lm.term_iiib),
        ("total", lm.total),
    ] {
        writeln!(out, "{k} = {}", full(v)).unwrap();
    }
    Ok(out)
}

/// Stage timing rows as CSV.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,p,t_factor,t_S,t_IV,t_IIIa,t_IIIb,t_total\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.p,
            full(r.t_factor),
            full(r.t_s),
            full(r.t_iv),
            full(r.t_iiia),
            full(r.t_iiib),
            full(r.t_total)
        )
        .unwrap();
    }
    out
}

/// `slam bench`: times the expansion stages on random problems and writes `bench.csv`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<(Vec<BenchRow>, String), CliError> {
    let rows = bench_sizes(&cfg.bench_sizes, cfg.bench_p, cfg.bench_repeats, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let csv = bench_csv(&rows);
    write_outputs(&cfg.out, &[("bench.csv", &csv)])?;
    Ok((rows, csv))
}
