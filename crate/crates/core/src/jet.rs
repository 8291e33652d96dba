//! Truncated multivariate Taylor arithmetic ("jets") for exact local derivatives.
//!
//! A jet in `m` variables of order `k` stores the Taylor coefficients `c_alpha = f^(alpha) / alpha!`
//! for all multi-indices with `|alpha| <= k`. Arithmetic on jets is arithmetic on truncated
//! polynomials, so evaluating a model on seeded jets yields its derivatives to order `k`.
//! Models are written once against [`Real`] and evaluated on `f64` or [`Jet`].

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Mutex, OnceLock};

use crate::sparse_tensors::LocalDerivs;

/// Highest supported derivative order.
pub const MAX_ORDER: usize = 4;

/// Monomial layout and multiplication table for a given `(nvars, order)`.
#[derive(Debug)]
pub struct JetSpace {
    nvars: usize,
    order: usize,
    monomials: Vec<Vec<u8>>,
    mul: Vec<(u16, u16, u16)>,
    /// For `r = 1..=order`, monomial index and `alpha!` of each ordered `r`-tuple of variables.
    tuples: Vec<Vec<(usize, f64)>>,
}

fn enumerate_monomials(nvars: usize, order: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; nvars]];
    for degree in 1..=order {
        let mut cur = vec![0u8; nvars];
        fill(&mut out, &mut cur, 0, degree);
    }
    out
}

fn fill(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, var: usize, remaining: usize) {
    if var + 1 == cur.len() {
        cur[var] = remaining as u8;
        out.push(cur.clone());
        cur[var] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        cur[var] = e as u8;
        fill(out, cur, var + 1, remaining - e);
    }
    cur[var] = 0;
}

impl JetSpace {
    fn build(nvars: usize, order: usize) -> Self {
        assert!(nvars >= 1 && order <= MAX_ORDER);
        let monomials = enumerate_monomials(nvars, order);
        let index: HashMap<Vec<u8>, usize> = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let mut mul = Vec::new();
        for (i, a) in monomials.iter().enumerate() {
            for (j, b) in monomials.iter().enumerate() {
                let sum: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                if let Some(&k) = index.get(&sum) {
                    mul.push((i as u16, j as u16, k as u16));
                }
            }
        }
        let mut tuples = vec![Vec::new()];
        for r in 1..=order {
            let count = nvars.pow(r as u32);
            let mut table = Vec::with_capacity(count);
            for flat in 0..count {
                let mut alpha = vec![0u8; nvars];
                let mut rem = flat;
                for _ in 0..r {
                    alpha[rem % nvars] += 1;
                    rem /= nvars;
                }
                let weight: f64 = alpha.iter().map(|&e| factorial(e as usize)).product();
                table.push((index[&alpha], weight));
            }
            tuples.push(table);
        }
        Self {
            nvars,
            order,
            monomials,
            mul,
            tuples,
        }
    }

    /// Shared space for `(nvars, order)`; built once per process.
    pub fn get(nvars: usize, order: usize) -> &'static JetSpace {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), &'static JetSpace>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("jet cache poisoned");
        guard
            .entry((nvars, order))
            .or_insert_with(|| Box::leak(Box::new(JetSpace::build(nvars, order))))
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Independent variables seeded at `x`.
    pub fn variables(&'static self, x: &[f64]) -> Vec<Jet> {
        assert_eq!(x.len(), self.nvars);
        x.iter()
            .enumerate()
            .map(|(k, &v)| {
                let mut c = vec![0.0; self.len()];
                c[0] = v;
                if self.order >= 1 {
                    c[1 + k] = 1.0;
                }
                Jet { space: self, c }
            })
            .collect()
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

/// Truncated Taylor polynomial around a point.
#[derive(Debug, Clone)]
pub struct Jet {
    space: &'static JetSpace,
    c: Vec<f64>,
}

impl PartialEq for Jet {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.space, other.space) && self.c == other.c
    }
}

impl Jet {
    pub fn constant_in(space: &'static JetSpace, v: f64) -> Self {
        let mut c = vec![0.0; space.len()];
        c[0] = v;
        Jet { space, c }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.c
    }

    /// Partial derivative along the ordered variable tuple `vars`.
    pub fn derivative(&self, vars: &[usize]) -> f64 {
        if vars.is_empty() {
            return self.c[0];
        }
        let m = self.space.nvars;
        let flat = vars.iter().rev().fold(0, |acc, &v| acc * m + v);
        let (idx, w) = self.space.tuples[vars.len()][flat];
        self.c[idx] * w
    }

    /// Value, gradient and derivative arrays in the layout of [`LocalDerivs`].
    pub fn to_local_derivs(&self) -> LocalDerivs {
        let m = self.space.nvars;
        let order = self.space.order;
        let mut d = LocalDerivs::zeros(m, order);
        d.value = self.c[0];
        let fill = |r: usize, dst: &mut Vec<f64>| {
            // tuples are stored with the first variable least significant; LocalDerivs is row-major
            for (flat, out) in dst.iter_mut().enumerate() {
                let mut rem = flat;
                let mut rev = 0;
                for _ in 0..r {
                    rev = rev * m + rem % m;
                    rem /= m;
                }
                let (idx, w) = self.space.tuples[r][rev];
                *out = self.c[idx] * w;
            }
        };
        if order >= 1 {
            fill(1, &mut d.grad);
        }
        if order >= 2 {
            fill(2, &mut d.hess);
        }
        if order >= 3 {
            fill(3, &mut d.third);
        }
        if order >= 4 {
            fill(4, &mut d.fourth);
        }
        d
    }

    fn zip(&self, other: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        debug_assert!(std::ptr::eq(self.space, other.space), "jets from different spaces");
        Jet {
            space: self.space,
            c: self.c.iter().zip(&other.c).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn mul_jet(&self, other: &Jet) -> Jet {
        debug_assert!(std::ptr::eq(self.space, other.space), "jets from different spaces");
        let mut c = vec![0.0; self.c.len()];
        for &(i, j, k) in &self.space.mul {
            c[k as usize] += self.c[i as usize] * other.c[j as usize];
        }
        Jet { space: self.space, c }
    }

    /// `sum_k coeffs[k] (x - x0)^k` by Horner, where `coeffs[k] = f^(k)(x0) / k!`.
    fn compose(&self, coeffs: &[f64]) -> Jet {
        let mut h = self.clone();
        h.c[0] = 0.0;
        let order = self.space.order;
        let mut out = Jet::constant_in(self.space, coeffs[order]);
        for k in (0..order).rev() {
            out = out.mul_jet(&h);
            out.c[0] += coeffs[k];
        }
        out
    }

    fn map_scalar(&self, f: impl Fn(f64) -> f64) -> Jet {
        Jet {
            space: self.space,
            c: self.c.iter().map(|x| f(*x)).collect(),
        }
    }
}

/// Scalar type that models are written against.
pub trait Real:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant living in the same space as `self`.
    fn lift(&self, v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn powf(&self, a: f64) -> Self;
    fn sqrt(&self) -> Self {
        self.powf(0.5)
    }
    fn square(&self) -> Self {
        self.clone() * self.clone()
    }
    fn recip(&self) -> Self {
        self.powf(-1.0)
    }
    /// `ln(1 + e^x)`.
    fn softplus(&self) -> Self;
}

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Real for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn powf(&self, a: f64) -> Self {
        f64::powf(*self, a)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn recip(&self) -> Self {
        1.0 / *self
    }
    fn softplus(&self) -> Self {
        softplus_f64(*self)
    }
}

impl Real for Jet {
    fn lift(&self, v: f64) -> Self {
        Jet::constant_in(self.space, v)
    }

    fn value(&self) -> f64 {
        self.c[0]
    }

    fn exp(&self) -> Self {
        let e = self.c[0].exp();
        let coeffs: Vec<f64> = (0..=self.space.order).map(|k| e / factorial(k)).collect();
        self.compose(&coeffs)
    }

    fn ln(&self) -> Self {
        let x0 = self.c[0];
        let coeffs: Vec<f64> = (0..=self.space.order)
            .map(|k| {
                if k == 0 {
                    x0.ln()
                } else {
                    let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                    sign / (k as f64 * x0.powi(k as i32))
                }
            })
            .collect();
        self.compose(&coeffs)
    }

    fn powf(&self, a: f64) -> Self {
        let x0 = self.c[0];
        let mut binom = 1.0;
        let coeffs: Vec<f64> = (0..=self.space.order)
            .map(|k| {
                if k > 0 {
                    binom *= (a - (k - 1) as f64) / k as f64;
                }
                binom * x0.powf(a - k as f64)
            })
            .collect();
        self.compose(&coeffs)
    }

    fn softplus(&self) -> Self {
        let x0 = self.c[0];
        let s = 1.0 / (1.0 + (-x0).exp());
        let q = s * (1.0 - s);
        let derivs = [softplus_f64(x0), s, q, q * (1.0 - 2.0 * s), q * (1.0 - 6.0 * s + 6.0 * s * s)];
        let coeffs: Vec<f64> = (0..=self.space.order)
            .map(|k| derivs[k] / factorial(k))
            .collect();
        self.compose(&coeffs)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        self.zip(&o, |a, b| a + b)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self.zip(&o, |a, b| a - b)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        self.mul_jet(&o)
    }
}

impl Div for Jet {
    type Output = Jet;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Jet) -> Jet {
        self.mul_jet(&o.recip())
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.map_scalar(|x| -x)
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, v: f64) -> Jet {
        self.c[0] += v;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, v: f64) -> Jet {
        self.c[0] -= v;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, v: f64) -> Jet {
        self.map_scalar(|x| x * v)
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, v: f64) -> Jet {
        self.map_scalar(|x| x / v)
    }
}
