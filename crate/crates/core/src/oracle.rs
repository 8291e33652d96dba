//! Dense and numerical-integration reference implementations.
//!
//! Everything here is deliberately naive: full dense tensors, a dense inverse, nested adaptive
//! quadrature and plain importance sampling. These are the yardsticks the sparse kernels and the
//! Laplace expansion are checked against, and they are shipped so the acceptance suite and
//! downstream users can rerun the comparisons.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sparse_tensors::{Block3, LocalDerivs, LocalTensorBundle, NeighborTensor3, NEIGHBOR_LEVELS};

/// Fully dense Hessian of the bundle.
pub fn dense_hessian(bundle: &LocalTensorBundle) -> DMatrix<f64> {
    let (n, p) = (bundle.n(), bundle.p());
    let big = n * p;
    let mut h = DMatrix::zeros(big, big);
    for (i, d) in bundle.intervals.iter().enumerate() {
        let m = 2 * p;
        for a in 0..m {
            for b in 0..m {
                h[(i * p + a, i * p + b)] += d.hess[a * m + b];
            }
        }
    }
    for (i, d) in bundle.nodes.iter().enumerate() {
        for a in 0..p {
            for b in 0..p {
                h[(i * p + a, i * p + b)] += d.hess[a * p + b];
            }
        }
    }
    h
}

fn scatter(bundle: &LocalTensorBundle, order: usize, pick: impl Fn(&LocalDerivs) -> &[f64]) -> Vec<f64> {
    let (n, p) = (bundle.n(), bundle.p());
    let big = n * p;
    let mut out = vec![0.0; big.pow(order as u32)];
    let mut add = |offset: usize, m: usize, local: &[f64]| {
        for (flat, &x) in local.iter().enumerate() {
            let mut rem = flat;
            let mut g = 0;
            let mut stride = 1;
            for _ in 0..order {
                g += (offset + rem % m) * stride;
                rem /= m;
                stride *= big;
            }
            out[g] += x;
        }
    };
    for (i, d) in bundle.intervals.iter().enumerate() {
        add(i * p, 2 * p, pick(d));
    }
    for (i, d) in bundle.nodes.iter().enumerate() {
        add(i * p, p, pick(d));
    }
    out
}

/// Fully dense third-derivative tensor, row-major, assembled entry by entry from the bundle.
pub fn dense_third(bundle: &LocalTensorBundle) -> Vec<f64> {
    scatter(bundle, 3, |d| &d.third)
}

/// Fully dense fourth-derivative tensor, row-major.
pub fn dense_fourth(bundle: &LocalTensorBundle) -> Vec<f64> {
    scatter(bundle, 4, |d| &d.fourth)
}

/// `X'_{..r..} = sum_s M_{rs} X_{..s..}` on each mode that has a matrix.
pub fn dense_mode_multiply(x: &[f64], big: usize, mats: [Option<DMatrix<f64>>; 3]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (mode, m) in mats.iter().enumerate() {
        let Some(m) = m else { continue };
        let stride = big.pow(2 - mode as u32);
        let mut next = vec![0.0; cur.len()];
        for (g, out) in next.iter_mut().enumerate() {
            let r = (g / stride) % big;
            let base = g - r * stride;
            *out = (0..big).map(|s| m[(r, s)] * cur[base + s * stride]).sum();
        }
        cur = next;
    }
    cur
}

/// The three higher-order terms of the log-marginal expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseTerms {
    pub iv: f64,
    pub iiia: f64,
    pub iiib: f64,
}

/// Direct summation of the correction terms with a fully dense `H^{-1}`.
///
/// `IV = -1/8 F_abcd Hi_ab Hi_cd`, `IIIa = 1/8 T_abc Hi_ab Hi_cd T_def Hi_ef`,
/// `IIIb = 1/12 T_abc Hi_ad Hi_be Hi_cf T_def`.
pub fn dense_terms(h: &DMatrix<f64>, t: &[f64], f: &[f64]) -> Result<DenseTerms> {
    let big = h.nrows();
    if big > 200 {
        return Err(Error::Invalid("dense oracle limited to N <= 200".into()));
    }
    if t.len() != big.pow(3) || f.len() != big.pow(4) {
        return Err(Error::Invalid("tensor sizes do not match H".into()));
    }
    let hinv = h
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(0))?
        .inverse();

    let mut iv = 0.0;
    for a in 0..big {
        for b in 0..big {
            let mut inner = 0.0;
            for c in 0..big {
                for d in 0..big {
                    inner += f[((a * big + b) * big + c) * big + d] * hinv[(c, d)];
                }
            }
            iv += hinv[(a, b)] * inner;
        }
    }

    let mut v = DVector::zeros(big);
    for a in 0..big {
        for b in 0..big {
            for c in 0..big {
                v[c] += hinv[(a, b)] * t[(a * big + b) * big + c];
            }
        }
    }
    let iiia = (v.transpose() * &hinv * &v)[(0, 0)];

    let w = dense_mode_multiply(t, big, [Some(hinv.clone()), Some(hinv.clone()), Some(hinv)]);
    let iiib: f64 = t.iter().zip(&w).map(|(x, y)| x * y).sum();

    Ok(DenseTerms {
        iv: -iv / 8.0,
        iiia: iiia / 8.0,
        iiib: iiib / 12.0,
    })
}

fn symmetrize(data: &[f64], m: usize, order: usize) -> Vec<f64> {
    let perms = permutations(order);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; order];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for k in (0..order).rev() {
            idx[k] = rem % m;
            rem /= m;
        }
        let mut acc = 0.0;
        for perm in &perms {
            let g = perm.iter().fold(0, |g, &k| g * m + idx[k]);
            acc += data[g];
        }
        *o = acc / perms.len() as f64;
    }
    out
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for perm in permutations(k - 1) {
        for pos in 0..=perm.len() {
            let mut q = perm.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Random symmetric derivative arrays of one local term with a positive-definite Hessian.
pub fn random_local_derivs(dim: usize, rng: &mut impl Rng) -> LocalDerivs {
    let mut d = LocalDerivs::zeros(dim, 4);
    d.value = rng.random_range(-1.0..1.0);
    for g in d.grad.iter_mut() {
        *g = rng.random_range(-1.0..1.0);
    }
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let h = &b * b.transpose() + DMatrix::identity(dim, dim) * 0.5;
    d.hess = h.transpose().as_slice().to_vec();
    let raw3: Vec<f64> = (0..dim.pow(3)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let raw4: Vec<f64> = (0..dim.pow(4)).map(|_| rng.random_range(-1.0..1.0)).collect();
    d.third = symmetrize(&raw3, dim, 3);
    d.fourth = symmetrize(&raw4, dim, 4);
    d
}

/// Derivatives at the critical point of a random sum of local quartic polynomials.
///
/// Every local Hessian is positive definite, so the assembled `H` is too.
pub fn random_bundle(n: usize, p: usize, rng: &mut impl Rng) -> LocalTensorBundle {
    let intervals = (0..n.saturating_sub(1))
        .map(|_| random_local_derivs(2 * p, rng))
        .collect();
    let nodes = (0..n).map(|_| random_local_derivs(p, rng)).collect();
    LocalTensorBundle::new(p, intervals, nodes).expect("well-formed random bundle")
}

/// Random (not necessarily symmetric) block.
pub fn random_block3(p: usize, rng: &mut impl Rng) -> Block3 {
    Block3::from_vec(p, (0..p * p * p).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Random tensor filling all seven neighbour levels.
pub fn random_neighbor_tensor(n: usize, p: usize, rng: &mut impl Rng) -> NeighborTensor3 {
    let mut t = NeighborTensor3::zeros(n, p);
    for o in NEIGHBOR_LEVELS {
        for b in 0..n.saturating_sub(*o.iter().max().unwrap()) {
            *t.block_mut(b + o[0], b + o[1], b + o[2]) = random_block3(p, rng);
        }
    }
    t
}

/// Largest relative disagreement between jet derivatives and finite differences, orders 1..=4.
///
/// Order 1 differences `value`; order `r > 1` differences the order `r - 1` array returned by
/// `derivs`. Central differences are Richardson-extrapolated. Each array's error is measured
/// relative to its largest entry.
pub fn derivative_check(
    value: impl Fn(&[f64]) -> f64,
    derivs: impl Fn(&[f64], usize) -> LocalDerivs,
    x: &[f64],
) -> f64 {
    let m = x.len();
    let exact = derivs(x, 4);
    let lower = |d: &LocalDerivs, r: usize| -> Vec<f64> {
        match r {
            0 => vec![d.value],
            1 => d.grad.clone(),
            2 => d.hess.clone(),
            _ => d.third.clone(),
        }
    };
    let eval = |y: &[f64], r: usize| -> Vec<f64> {
        if r == 0 {
            vec![value(y)]
        } else {
            lower(&derivs(y, r), r)
        }
    };
    let mut worst = 0.0_f64;
    for r in 1..=4 {
        let target = match r {
            1 => &exact.grad,
            2 => &exact.hess,
            3 => &exact.third,
            _ => &exact.fourth,
        };
        let inner = m.pow(r as u32 - 1);
        let mut approx = vec![0.0; target.len()];
        for a in 0..m {
            let h = 1e-3 * x[a].abs().max(1.0);
            let central = |h: f64| -> Vec<f64> {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[a] += h;
                dn[a] -= h;
                eval(&up, r - 1)
                    .iter()
                    .zip(eval(&dn, r - 1))
                    .map(|(u, d)| (u - d) / (2.0 * h))
                    .collect()
            };
            let coarse = central(h);
            let fine = central(h / 2.0);
            for k in 0..inner {
                approx[a * inner + k] = (4.0 * fine[k] - coarse[k]) / 3.0;
            }
        }
        let scale = target.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1e-300);
        let err = target
            .iter()
            .zip(&approx)
            .fold(0.0_f64, |e, (t, a)| e.max((t - a).abs()));
        if scale > 1e-12 || err > 1e-12 {
            worst = worst.max(err / scale);
        }
    }
    worst
}

/// Applies `m` to every index of a row-major local array of the given order.
fn transform_local(data: &[f64], m: &DMatrix<f64>, order: usize) -> Vec<f64> {
    let dim = m.nrows();
    let mut cur = data.to_vec();
    for mode in 0..order {
        let stride = dim.pow((order - 1 - mode) as u32);
        let mut next = vec![0.0; cur.len()];
        for (g, out) in next.iter_mut().enumerate() {
            let r = (g / stride) % dim;
            let base = g - r * stride;
            *out = (0..dim).map(|s| m[(r, s)] * cur[base + s * stride]).sum();
        }
        cur = next;
    }
    cur
}

/// Derivatives after the per-block change of variables `y~_i = B_i y_i`: every index of every
/// local array is multiplied by `B_i^{-T}`.
pub fn transform_bundle(bundle: &LocalTensorBundle, b: &[DMatrix<f64>]) -> LocalTensorBundle {
    let p = bundle.p();
    let inv_t: Vec<DMatrix<f64>> = b
        .iter()
        .map(|bi| bi.clone().try_inverse().expect("invertible block").transpose())
        .collect();
    let apply = |d: &LocalDerivs, m: &DMatrix<f64>| LocalDerivs {
        dim: d.dim,
        order: d.order,
        value: d.value,
        grad: transform_local(&d.grad, m, 1),
        hess: transform_local(&d.hess, m, 2),
        third: if d.third.is_empty() { vec![] } else { transform_local(&d.third, m, 3) },
        fourth: if d.fourth.is_empty() { vec![] } else { transform_local(&d.fourth, m, 4) },
    };
    let intervals = bundle
        .intervals
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut m = DMatrix::zeros(2 * p, 2 * p);
            m.view_mut((0, 0), (p, p)).copy_from(&inv_t[i]);
            m.view_mut((p, p), (p, p)).copy_from(&inv_t[i + 1]);
            apply(d, &m)
        })
        .collect();
    let nodes = bundle
        .nodes
        .iter()
        .enumerate()
        .map(|(i, d)| apply(d, &inv_t[i]))
        .collect();
    LocalTensorBundle::new(p, intervals, nodes).expect("same shapes")
}

/// Quartic Taylor polynomial `v + g e + H e e / 2 + T e e e / 6 + F e e e e / 24`, `e = x - center`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPolynomial {
    pub center: Vec<f64>,
    pub coefficients: LocalDerivs,
}

impl LocalPolynomial {
    /// Value and derivative arrays at `x`, up to `order`.
    pub fn derivs(&self, x: &[f64], order: usize) -> LocalDerivs {
        let c = &self.coefficients;
        let m = c.dim;
        let e: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let zero3 = vec![0.0; m * m * m];
        let zero4 = vec![0.0; m * m * m * m];
        let t = if c.third.is_empty() { &zero3 } else { &c.third };
        let f = if c.fourth.is_empty() { &zero4 } else { &c.fourth };
        // contract trailing indices with e, from the fourth-order array downwards
        let contract = |arr: &[f64], inner: usize| -> Vec<f64> {
            arr.chunks(inner * m)
                .flat_map(|row| row.chunks(m).map(|last| last.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>())
                .collect()
        };
        let fe = contract(f, m * m); // m^3
        let fee = contract(&fe, m); // m^2
        let feee = contract(&fee, 1); // m
        let feeee: f64 = feee.iter().zip(&e).map(|(a, b)| a * b).sum();
        let te = contract(t, m);
        let tee = contract(&te, 1);
        let teee: f64 = tee.iter().zip(&e).map(|(a, b)| a * b).sum();
        let he = contract(&c.hess, 1);
        let hee: f64 = he.iter().zip(&e).map(|(a, b)| a * b).sum();
        let ge: f64 = c.grad.iter().zip(&e).map(|(a, b)| a * b).sum();

        let mut d = LocalDerivs::zeros(m, order);
        d.value = c.value + ge + hee / 2.0 + teee / 6.0 + feeee / 24.0;
        for a in 0..m {
            d.grad[a] = c.grad[a] + he[a] + tee[a] / 2.0 + feee[a] / 6.0;
        }
        if order >= 2 {
            for k in 0..m * m {
                d.hess[k] = c.hess[k] + te[k] + fee[k] / 2.0;
            }
        }
        if order >= 3 {
            for k in 0..m * m * m {
                d.third[k] = t[k] + fe[k];
            }
        }
        if order >= 4 {
            d.fourth.copy_from_slice(f);
        }
        d
    }
}

/// `ell` as a sum of local quartic polynomials on intervals and points.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPolynomialObjective {
    pub p: usize,
    pub intervals: Vec<LocalPolynomial>,
    pub nodes: Vec<LocalPolynomial>,
}

impl LocalPolynomialObjective {
    /// One variable: `c0 + c1 y + c2 y^2/2 + c3 y^3/6 + c4 y^4/24`.
    pub fn scalar(c: &[f64; 5]) -> Self {
        let mut d = LocalDerivs::zeros(1, 4);
        d.value = c[0];
        d.grad[0] = c[1];
        d.hess[0] = c[2];
        d.third[0] = c[3];
        d.fourth[0] = c[4];
        Self {
            p: 1,
            intervals: vec![],
            nodes: vec![LocalPolynomial {
                center: vec![0.0],
                coefficients: d,
            }],
        }
    }

    /// Polynomials whose local derivative arrays at `center` are the given bundle's.
    pub fn from_bundle(bundle: &LocalTensorBundle, center: &[f64]) -> Self {
        let p = bundle.p();
        let intervals = bundle
            .intervals
            .iter()
            .enumerate()
            .map(|(i, d)| LocalPolynomial {
                center: center[i * p..(i + 2) * p].to_vec(),
                coefficients: d.clone(),
            })
            .collect();
        let nodes = bundle
            .nodes
            .iter()
            .enumerate()
            .map(|(i, d)| LocalPolynomial {
                center: center[i * p..(i + 1) * p].to_vec(),
                coefficients: d.clone(),
            })
            .collect();
        Self { p, intervals, nodes }
    }

    /// Random block-tridiagonal quadratic minimized at `c`.
    pub fn random_quadratic(n: usize, p: usize, c: &[f64], rng: &mut impl Rng) -> Self {
        let mut bundle = random_bundle(n, p, rng);
        for d in bundle.intervals.iter_mut().chain(bundle.nodes.iter_mut()) {
            d.grad.iter_mut().for_each(|x| *x = 0.0);
            d.third.iter_mut().for_each(|x| *x = 0.0);
            d.fourth.iter_mut().for_each(|x| *x = 0.0);
        }
        Self::from_bundle(&bundle, c)
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let p = self.p;
        let iv: f64 = self
            .intervals
            .iter()
            .enumerate()
            .map(|(i, poly)| poly.derivs(&y[i * p..(i + 2) * p], 1).value)
            .sum();
        let nv: f64 = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, poly)| poly.derivs(&y[i * p..(i + 1) * p], 1).value)
            .sum();
        iv + nv
    }

    pub fn bundle(&self, y: &[f64], order: usize) -> Result<LocalTensorBundle> {
        let p = self.p;
        let intervals = self
            .intervals
            .iter()
            .enumerate()
            .map(|(i, poly)| poly.derivs(&y[i * p..(i + 2) * p], order))
            .collect();
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, poly)| poly.derivs(&y[i * p..(i + 1) * p], order))
            .collect();
        LocalTensorBundle::new(p, intervals, nodes)
    }
}

impl crate::laplace_core::PathObjective for LocalPolynomialObjective {
    fn n(&self) -> usize {
        self.nodes.len()
    }
    fn p(&self) -> usize {
        self.p
    }
    fn value(&self, y: &[f64]) -> f64 {
        LocalPolynomialObjective::value(self, y)
    }
    fn bundle(&self, y: &[f64], order: usize) -> Result<LocalTensorBundle> {
        LocalPolynomialObjective::bundle(self, y, order)
    }
}

/// Plain dense Newton minimization with central-difference derivatives, as an independent check
/// on the block solver. Returns the last iterate.
pub fn dense_newton(f: &dyn Fn(&[f64]) -> f64, y0: &[f64], grad_tol: f64, max_iter: usize) -> Vec<f64> {
    let n = y0.len();
    let mut y = y0.to_vec();
    for _ in 0..max_iter {
        let h = 1e-4;
        let at = |dy: &[(usize, f64)]| {
            let mut z = y.clone();
            for &(k, d) in dy {
                z[k] += d;
            }
            f(&z)
        };
        let f0 = f(&y);
        let g = DVector::from_fn(n, |a, _| (at(&[(a, h)]) - at(&[(a, -h)])) / (2.0 * h));
        if g.amax() < grad_tol {
            break;
        }
        let hess = DMatrix::from_fn(n, n, |a, b| {
            if a == b {
                (at(&[(a, h)]) - 2.0 * f0 + at(&[(a, -h)])) / (h * h)
            } else {
                (at(&[(a, h), (b, h)]) - at(&[(a, h), (b, -h)]) - at(&[(a, -h), (b, h)]) + at(&[(a, -h), (b, -h)]))
                    / (4.0 * h * h)
            }
        });
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = y.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let v = f(&trial);
            if v.is_finite() && v <= f0 {
                y = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return y;
            }
        }
    }
    y
}

/// Logarithm of an integral with an absolute error estimate on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogIntegral {
    pub log_value: f64,
    pub error: f64,
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const G_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &mut dyn FnMut(f64) -> Result<f64>, a: f64, b: f64) -> Result<(f64, f64)> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = G_WEIGHTS[3] * fc;
    for k in 0..7 {
        let x = h * GK_NODES[k];
        let s = f(c - x)? + f(c + x)?;
        kronrod += GK_WEIGHTS[k] * s;
        if k % 2 == 1 {
            gauss += G_WEIGHTS[k / 2] * s;
        }
    }
    Ok((kronrod * h, ((kronrod - gauss) * h).abs()))
}

/// Adaptive Gauss–Kronrod (7/15) on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_gk(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    tol: f64,
    max_intervals: usize,
) -> Result<(f64, f64)> {
    let (v, e) = gk15(f, a, b)?;
    let mut pieces = vec![(a, b, v, e)];
    loop {
        let total_err: f64 = pieces.iter().map(|x| x.3).sum();
        if total_err <= tol || pieces.len() >= max_intervals {
            let total: f64 = pieces.iter().map(|x| x.2).sum();
            return Ok((total, total_err));
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _, _) = pieces.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(f, lo, mid)?;
        let (v2, e2) = gk15(f, mid, hi)?;
        pieces.push((lo, mid, v1, e1));
        pieces.push((mid, hi, v2, e2));
    }
}

/// Whitening frame: `y = center + L z` with `L L^T = H^{-1}`.
fn whitening(center: &[f64], hessian: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = center.len();
    if hessian.shape() != (n, n) {
        return Err(Error::Invalid("hessian shape does not match center".into()));
    }
    let hinv = hessian
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(0))?
        .inverse();
    let l = hinv.cholesky().ok_or(Error::NotPositiveDefinite(0))?.l();
    let log_det_l = (0..n).map(|i| l[(i, i)].ln()).sum();
    Ok((l, log_det_l))
}

/// `log ∫ exp(-ell(y)) dy` by nested adaptive Gauss–Kronrod quadrature, for `N <= 4`.
///
/// The integral runs over the box `|z_k| <= radius` in the frame `y = center + L z`,
/// `L L^T = H^{-1}`, so `center` and `hessian` should be the mode and the curvature there.
/// `ell` may return `+inf` outside its domain; `NaN` or an overflowing integrand is an error.
pub fn integrate_log_m(
    ell: &dyn Fn(&[f64]) -> f64,
    center: &[f64],
    hessian: &DMatrix<f64>,
    radius: f64,
    tol: f64,
) -> Result<LogIntegral> {
    let n = center.len();
    if n == 0 || n > 4 {
        return Err(Error::Invalid(format!("quadrature supports 1 <= N <= 4, got {n}")));
    }
    let (l, log_det_l) = whitening(center, hessian)?;
    let ell0 = ell(center);
    if !ell0.is_finite() {
        return Err(Error::NonFinite);
    }
    let integrand = |z: &[f64]| -> Result<f64> {
        let zv = DVector::from_column_slice(z);
        let y = DVector::from_column_slice(center) + &l * zv;
        let v = ell(y.as_slice());
        if v.is_nan() {
            return Err(Error::NonFinite);
        }
        let w = (ell0 - v).exp();
        if !w.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(w)
    };
    // inner dimensions get a tighter share of the tolerance
    let per_dim_tol = tol / (n as f64 * (2.0 * radius).powi(n as i32 - 1)).max(1.0);
    let mut z = vec![0.0; n];
    let (value, err) = nested(&integrand, &mut z, 0, radius, per_dim_tol)?;
    if !(value > 0.0) {
        return Err(Error::NonFinite);
    }
    Ok(LogIntegral {
        log_value: -ell0 + log_det_l + value.ln(),
        error: err / value,
    })
}

fn nested(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    z: &mut Vec<f64>,
    dim: usize,
    radius: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let n = z.len();
    let max_intervals = if n == 1 { 2000 } else { 64 };
    let mut inner_err = 0.0_f64;
    let mut calls = 0usize;
    let (v, e) = {
        let mut g = |x: f64| -> Result<f64> {
            z[dim] = x;
            if dim + 1 == n {
                f(z)
            } else {
                let mut zz = z.clone();
                let (v, e) = nested(f, &mut zz, dim + 1, radius, tol)?;
                inner_err += e;
                calls += 1;
                Ok(v)
            }
        };
        adaptive_gk(&mut g, -radius, radius, tol, max_intervals)?
    };
    // an inner error bound propagates through weights summing to the interval length
    let inner = if calls > 0 { inner_err / calls as f64 * 2.0 * radius } else { 0.0 };
    Ok((v, e + inner))
}

/// `log ∫ exp(-ell(y)) dy` by importance sampling from `N(center, scale^2 H^{-1})`.
///
/// Returns the estimate and its standard error (delta method on the log scale).
pub fn importance_sample_log_m(
    ell: &dyn Fn(&[f64]) -> f64,
    center: &[f64],
    hessian: &DMatrix<f64>,
    samples: usize,
    scale: f64,
    seed: u64,
) -> Result<LogIntegral> {
    let n = center.len();
    if n == 0 || n > 12 {
        return Err(Error::Invalid(format!("importance sampling supports 1 <= N <= 12, got {n}")));
    }
    let (l, log_det_l) = whitening(center, hessian)?;
    let ell0 = ell(center);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // log q(y) = -n/2 log(2 pi) - log|scale L| - |z|^2 / 2 with y = center + scale L z
    let log_norm = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_l - n as f64 * scale.ln();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut z = DVector::zeros(n);
    for _ in 0..samples {
        for k in 0..n {
            z[k] = rng.sample::<f64, _>(StandardNormal);
        }
        let y = DVector::from_column_slice(center) + (&l * &z) * scale;
        let v = ell(y.as_slice());
        if v.is_nan() {
            return Err(Error::NonFinite);
        }
        let log_q = log_norm - 0.5 * z.norm_squared();
        let w = (ell0 - v - log_q).exp();
        if !w.is_finite() {
            return Err(Error::NonFinite);
        }
        sum += w;
        sum_sq += w * w;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0);
    let se = (var / m).sqrt();
    Ok(LogIntegral {
        log_value: -ell0 + mean.ln(),
        error: se / mean,
    })
}
