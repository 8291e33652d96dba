//! Critical-path search and the log-marginal expansion
//! `log M ~ -ell(yhat) + N/2 log(2 pi) - 1/2 log|H| + IV + IIIa + IIIb`.
//!
//! Every step is linear in the number of time points: block Cholesky for `H`, the banded part of
//! `H^{-1}` for IV and IIIa, and a per-level recurrence for IIIb.

use std::time::Instant;

use crate::block_linalg::{
    cholesky_block, level_multiply, log_det, near_diagonal_inverse, quadratic_form_hinv, solve,
    Block, BlockBandedSym, LevelMatrix, SBlocks, SubDiagFactor,
};
use crate::error::{Error, Result};
use crate::models::{Model, Objective, Observations, TimeGrid};
use crate::sparse_tensors::{
    assemble_tensor3, contract_tensor3_with_banded, contract_tensor4_with_banded, inner_product3,
    mode_transform3, s_recurrence, shift_multiply3, LocalTensorBundle, ModeOp, NeighborTensor3,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A smooth `ell` on `n` blocks of `p` variables whose derivatives come as local bundles.
pub trait PathObjective {
    fn n(&self) -> usize;
    fn p(&self) -> usize;
    /// `ell(y)`, or `+inf` outside the domain.
    fn value(&self, y: &[f64]) -> f64;
    fn bundle(&self, y: &[f64], order: usize) -> Result<LocalTensorBundle>;
}

impl<M: Model> PathObjective for Objective<'_, M> {
    fn n(&self) -> usize {
        Objective::n(self)
    }
    fn p(&self) -> usize {
        Objective::p(self)
    }
    fn value(&self, y: &[f64]) -> f64 {
        Objective::value(self, y)
    }
    fn bundle(&self, y: &[f64], order: usize) -> Result<LocalTensorBundle> {
        Objective::bundle(self, y, order)
    }
}

/// Newton iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Stop when `max |grad| <= rel_tol * max(1, |ell|)`.
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub boost_start: f64,
    pub boost_max: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iterations: 200,
            max_halvings: 40,
            boost_start: 1e-6,
            boost_max: 1e2,
        }
    }
}

/// Minimizer of `ell` in latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPath {
    pub yhat: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub ell_value: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Factorizes `h`, adding `lambda I` with growing `lambda` when it is not positive definite.
fn boosted_factor(h: &crate::block_linalg::BlockTriDiag, opts: &NewtonOptions) -> Result<SubDiagFactor> {
    match cholesky_block(h) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite(first)) => {
            let mut lambda = opts.boost_start;
            let mut last = first;
            while lambda <= opts.boost_max * (1.0 + 1e-12) {
                match cholesky_block(&h.shifted(lambda)) {
                    Ok(f) => return Ok(f),
                    Err(Error::NotPositiveDefinite(i)) => last = i,
                    Err(e) => return Err(e),
                }
                lambda *= 10.0;
            }
            Err(Error::IndefiniteHessian(last))
        }
        Err(e) => Err(e),
    }
}

/// Damped Newton search for the critical path, starting from `y0`.
pub fn find_critical_path(
    obj: &impl PathObjective,
    y0: &[f64],
    opts: &NewtonOptions,
) -> Result<CriticalPath> {
    let (n, p) = (obj.n(), obj.p());
    if y0.len() != n * p || y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("initial path must have n * p finite values".into()));
    }
    let mut y = y0.to_vec();
    let mut grad_norm = f64::INFINITY;
    for iteration in 0..opts.max_iterations {
        let bundle = obj.bundle(&y, 2)?;
        let ell = bundle.value();
        let g = bundle.gradient();
        grad_norm = max_abs(&g);
        if grad_norm <= opts.rel_tol * ell.abs().max(1.0) {
            return Ok(CriticalPath {
                yhat: y,
                n,
                p,
                ell_value: ell,
                grad_norm,
                converged: true,
                iterations: iteration,
            });
        }
        let factor = boosted_factor(&bundle.hessian()?, opts)?;
        let step = solve(&factor, &g);
        let predicted: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        // below roundoff of ell a decrease cannot be observed, so take the Newton step as is
        let roundoff = 64.0 * f64::EPSILON * ell.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = y.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let v = obj.value(&trial);
            if v.is_finite() && (v < ell || (predicted * t <= roundoff && v <= ell + roundoff)) {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) => y = next,
            None => {
                return Err(Error::NonConvergence {
                    iterations: iteration + 1,
                    grad_norm,
                })
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iterations,
        grad_norm,
    })
}

/// `-ell(yhat) + N/2 log(2 pi) - 1/2 log|H|`.
pub fn laplace_basic(ell_value: f64, factor: &SubDiagFactor) -> f64 {
    let big = (factor.n() * factor.p()) as f64;
    -ell_value + 0.5 * big * LN_2PI - 0.5 * log_det(factor)
}

/// `IV = -1/8 F_abcd Hi_ab Hi_cd`.
pub fn term_iv(bundle: &LocalTensorBundle, hinv: &BlockBandedSym) -> f64 {
    -contract_tensor4_with_banded(bundle, hinv) / 8.0
}

/// `IIIa = 1/8 v^T H^{-1} v` with `v_c = Hi_ab T_abc`.
pub fn term_iiia(t: &NeighborTensor3, factor: &SubDiagFactor, hinv: &BlockBandedSym) -> f64 {
    let v = contract_tensor3_with_banded(t, hinv);
    quadratic_form_hinv(factor, &v) / 8.0
}

/// Upper-triangular `C` with `S = C^T C`, and `C^{-1}`.
fn upper_cholesky(s: &Block, index: usize) -> Result<(Block, Block)> {
    let l = s
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(index))?
        .l();
    let c = l.transpose();
    let c_inv = c
        .clone()
        .solve_upper_triangular(&Block::identity(s.nrows(), s.nrows()))
        .ok_or(Error::NotPositiveDefinite(index))?;
    Ok((c, c_inv))
}

/// `IIIb = 1/12 T_abc Hi_ad Hi_be Hi_cf T_def`.
///
/// With `H^{-1} = B^T B`, `B = (I - A)^{-1} D^{-1}`, the variables are whitened per block by
/// `D^{-1}` and then by the upper Cholesky factor `C_i` of `S_i`, which turns the sub-diagonal
/// into `Â_i = C_{i+1} A_i C_i^{-1}` and makes every diagonal block of the inverse the identity.
/// The double sum over powers of `Â` then collapses to the recurrence `𝒮` and a fixed set of
/// single-level corrections:
///
/// `12 IIIb = 2<T̂, 𝒮> + 6<T̂, (I ⊗ (I + Â + Â²) ⊗ (Â + Â²)) 𝒮> + 6<T̂, ((I + Â) ⊗ Â ⊗ Âᵀ) T̂> - <T̂, T̂>`.
pub fn term_iiib(t: &NeighborTensor3, factor: &SubDiagFactor, s: &SBlocks) -> Result<f64> {
    let (n, p) = (factor.n(), factor.p());
    let t_tilde = mode_transform3(t, factor.d_inv(), [ModeOp::Apply; 3]);
    let mut c = Vec::with_capacity(n);
    let mut c_inv = Vec::with_capacity(n);
    for (i, si) in s.blocks().iter().enumerate() {
        let (ci, ci_inv) = upper_cholesky(si, i)?;
        c.push(ci);
        c_inv.push(ci_inv);
    }
    let t_hat = mode_transform3(&t_tilde, &c, [ModeOp::Apply; 3]);
    let a_hat: Vec<Block> = factor
        .a()
        .iter()
        .enumerate()
        .map(|(i, a)| &c[i + 1] * a * &c_inv[i])
        .collect();
    let script_s = s_recurrence(&t_hat, &a_hat);

    // shift_multiply3 contracts against the row index, so left action by M is passing M^T
    let a1 = LevelMatrix::sub_diagonal(&a_hat, p);
    let a2 = level_multiply(&a1, &a1);
    let left = [None, Some(a1.transpose()), Some(a2.transpose())];
    let a1_t = a1.transpose();

    let mut bracket = 2.0 * inner_product3(&t_hat, &script_s) - inner_product3(&t_hat, &t_hat);
    for j in 0..3 {
        for k in 1..3 {
            let moved = shift_multiply3(&script_s, [None, left[j].as_ref(), left[k].as_ref()]);
            bracket += 6.0 * inner_product3(&t_hat, &moved);
        }
    }
    for j in 0..2 {
        // Âᵀ in the third mode acts on the left as (Âᵀ), i.e. passes Â itself
        let moved = shift_multiply3(&t_hat, [left[j].as_ref(), Some(&a1_t), Some(&a1)]);
        bracket += 6.0 * inner_product3(&t_hat, &moved);
    }
    Ok(bracket / 12.0)
}

/// How many expansion terms to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Basic,
    Higher,
}

impl std::str::FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Order::Basic),
            "higher" => Ok(Order::Higher),
            other => Err(Error::Invalid(format!("order must be basic or higher, got {other}"))),
        }
    }
}

/// Terms of the log-marginal expansion at the critical path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMarginal {
    pub basic: f64,
    pub term_iv: f64,
    pub term_iiia: f64,
    pub term_iiib: f64,
    pub total: f64,
    /// Number of integration variables `n p`.
    pub dim: usize,
}

/// Wall-clock seconds spent in each stage of [`expansion_terms`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub factor: f64,
    pub s: f64,
    pub iv: f64,
    pub iiia: f64,
    pub iiib: f64,
    pub total: f64,
}

/// Evaluates the expansion from derivatives at the critical point.
pub fn expansion_terms(
    ell_value: f64,
    bundle: &LocalTensorBundle,
    order: Order,
) -> Result<(LogMarginal, StageTimes)> {
    let start = Instant::now();
    let mut times = StageTimes::default();
    let h = bundle.hessian()?;
    let factor = cholesky_block(&h)?;
    times.factor = start.elapsed().as_secs_f64();
    let basic = laplace_basic(ell_value, &factor);
    let dim = bundle.n() * bundle.p();
    if order == Order::Basic {
        times.total = start.elapsed().as_secs_f64();
        return Ok((
            LogMarginal {
                basic,
                term_iv: 0.0,
                term_iiia: 0.0,
                term_iiib: 0.0,
                total: basic,
                dim,
            },
            times,
        ));
    }
    if bundle.order() < 4 {
        return Err(Error::Invalid("higher-order terms need fourth derivatives".into()));
    }
    let mark = Instant::now();
    let s = factor.s_blocks();
    let hinv = near_diagonal_inverse(&factor, &s);
    times.s = mark.elapsed().as_secs_f64();

    let mark = Instant::now();
    let iv = term_iv(bundle, &hinv);
    times.iv = mark.elapsed().as_secs_f64();

    let mark = Instant::now();
    let t = assemble_tensor3(bundle);
    let iiia = term_iiia(&t, &factor, &hinv);
    times.iiia = mark.elapsed().as_secs_f64();

    let mark = Instant::now();
    let iiib = term_iiib(&t, &factor, &s)?;
    times.iiib = mark.elapsed().as_secs_f64();
    times.total = start.elapsed().as_secs_f64();

    Ok((
        LogMarginal {
            basic,
            term_iv: iv,
            term_iiia: iiia,
            term_iiib: iiib,
            total: basic + iv + iiia + iiib,
            dim,
        },
        times,
    ))
}

/// Critical path plus expansion for an arbitrary objective.
pub fn log_marginal_at(
    obj: &impl PathObjective,
    y0: &[f64],
    order: Order,
    opts: &NewtonOptions,
) -> Result<(LogMarginal, CriticalPath)> {
    let path = find_critical_path(obj, y0, opts)?;
    let deriv_order = if order == Order::Higher { 4 } else { 2 };
    let bundle = obj.bundle(&path.yhat, deriv_order)?;
    let (lm, _) = expansion_terms(path.ell_value, &bundle, order)?;
    Ok((lm, path))
}

/// `log M(theta)` for a model on a grid with data, starting Newton from the interpolated data
/// unless `y0` is given.
pub fn log_marginal<M: Model>(
    model: &M,
    theta: &[f64],
    grid: &TimeGrid,
    obs: &Observations,
    order: Order,
    y0: Option<&[f64]>,
) -> Result<(LogMarginal, CriticalPath)> {
    let obj = Objective::new(model, theta, grid, obs)?;
    let init = match y0 {
        Some(y) => y.to_vec(),
        None => obj.initial_path(),
    };
    log_marginal_at(&obj, &init, order, &NewtonOptions::default())
}
