//! Block-tridiagonal linear algebra.
//!
//! The Hessian of a nearest-neighbour log-likelihood over `n` time points with `p` variables
//! per point is symmetric block-tridiagonal. Its lower Cholesky factor is written as
//! `L = D (I - A)` where `D` is block diagonal (each block lower triangular) and `A` has
//! blocks only on the first block sub-diagonal. Everything here runs in `O(n p^3)`.
//!
//! The near-diagonal part of `H^{-1}` follows from the terminating series
//! `(I - A)^{-1} = sum_q A^q`, which groups as
//! `H^{-1} = D^{-T} (sum_{m>0} S A^m + S + sum_{m>0} A^{Tm} S) D^{-1}` with
//! `S = sum_q A^{Tq} A^q`, computed by the backward recurrence `S_k = I + A_k^T S_{k+1} A_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Block = DMatrix<f64>;

fn symmetrize(m: &Block) -> Block {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry relative to the largest entry; zero for the zero matrix.
#[cfg(test)]
pub(crate) fn relative_asymmetry(m: &Block) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Symmetric block-tridiagonal matrix.
///
/// `diag[i]` is block `(i, i)` and `sub[i]` is block `(i + 1, i)`; the super-diagonal is implied.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTriDiag {
    p: usize,
    diag: Vec<Block>,
    sub: Vec<Block>,
}

impl BlockTriDiag {
    /// Builds the matrix, symmetrizing each diagonal block.
    pub fn new(diag: Vec<Block>, sub: Vec<Block>) -> Result<Self> {
        let n = diag.len();
        if n == 0 {
            return Err(Error::Invalid("block-tridiagonal matrix needs n >= 1".into()));
        }
        let p = diag[0].nrows();
        if p == 0 {
            return Err(Error::Invalid("block size must be >= 1".into()));
        }
        if sub.len() != n - 1 {
            return Err(Error::Invalid(format!(
                "expected {} sub-diagonal blocks, got {}",
                n - 1,
                sub.len()
            )));
        }
        if diag.iter().chain(sub.iter()).any(|b| b.shape() != (p, p)) {
            return Err(Error::Invalid(format!("all blocks must be {p}x{p}")));
        }
        let diag = diag.iter().map(symmetrize).collect();
        Ok(Self { p, diag, sub })
    }

    pub fn identity(n: usize, p: usize) -> Self {
        Self {
            p,
            diag: vec![Block::identity(p, p); n],
            sub: vec![Block::zeros(p, p); n.saturating_sub(1)],
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn diag(&self) -> &[Block] {
        &self.diag
    }

    pub fn sub(&self) -> &[Block] {
        &self.sub
    }

    /// Returns a copy with `lambda` added to every diagonal entry.
    pub fn shifted(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for d in &mut out.diag {
            for k in 0..self.p {
                d[(k, k)] += lambda;
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let (n, p) = (self.n(), self.p);
        assert_eq!(x.len(), n * p, "vector length must be n * p");
        let mut y = vec![0.0; n * p];
        for i in 0..n {
            let xi = DVector::from_column_slice(&x[i * p..(i + 1) * p]);
            let mut yi = &self.diag[i] * &xi;
            if i > 0 {
                let xm = DVector::from_column_slice(&x[(i - 1) * p..i * p]);
                yi += &self.sub[i - 1] * xm;
            }
            if i + 1 < n {
                let xp = DVector::from_column_slice(&x[(i + 1) * p..(i + 2) * p]);
                yi += self.sub[i].tr_mul(&xp);
            }
            y[i * p..(i + 1) * p].copy_from_slice(yi.as_slice());
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p);
        let mut m = DMatrix::zeros(n * p, n * p);
        for i in 0..n {
            m.view_mut((i * p, i * p), (p, p)).copy_from(&self.diag[i]);
        }
        for i in 0..n.saturating_sub(1) {
            m.view_mut(((i + 1) * p, i * p), (p, p)).copy_from(&self.sub[i]);
            m.view_mut((i * p, (i + 1) * p), (p, p))
                .copy_from(&self.sub[i].transpose());
        }
        m
    }
}

/// The factor `L = D (I - A)` of a block-tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SubDiagFactor {
    p: usize,
    d: Vec<Block>,
    d_inv: Vec<Block>,
    a: Vec<Block>,
}

impl SubDiagFactor {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Lower-triangular diagonal blocks of `D`.
    pub fn d(&self) -> &[Block] {
        &self.d
    }

    /// Inverses of the blocks of `D`.
    pub fn d_inv(&self) -> &[Block] {
        &self.d_inv
    }

    /// `a()[i]` is block `(i + 1, i)` of `A`.
    pub fn a(&self) -> &[Block] {
        &self.a
    }

    pub fn s_blocks(&self) -> SBlocks {
        compute_s(&self.a, self.p, self.n())
    }

    /// Dense `L = D (I - A)`.
    pub fn to_dense_l(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p);
        let mut l = DMatrix::zeros(n * p, n * p);
        for i in 0..n {
            l.view_mut((i * p, i * p), (p, p)).copy_from(&self.d[i]);
        }
        for i in 0..n.saturating_sub(1) {
            let e = -(&self.d[i + 1] * &self.a[i]);
            l.view_mut(((i + 1) * p, i * p), (p, p)).copy_from(&e);
        }
        l
    }
}

/// Blocks `S_k` of the block-diagonal matrix `S = sum_q A^{Tq} A^q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SBlocks(pub Vec<Block>);

impl SBlocks {
    pub fn blocks(&self) -> &[Block] {
        &self.0
    }
}

/// Block-tridiagonal part of a symmetric matrix (used for `H^{-1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBandedSym {
    p: usize,
    diag: Vec<Block>,
    sub: Vec<Block>,
}

impl BlockBandedSym {
    pub fn new(diag: Vec<Block>, sub: Vec<Block>) -> Result<Self> {
        let t = BlockTriDiag::new(diag, sub)?;
        Ok(Self {
            p: t.p,
            diag: t.diag,
            sub: t.sub,
        })
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn diag(&self) -> &[Block] {
        &self.diag
    }

    /// `sub()[i]` is block `(i + 1, i)`.
    pub fn sub(&self) -> &[Block] {
        &self.sub
    }

    /// Block `(i, j)` for `|i - j| <= 1`, `None` outside the band.
    pub fn block(&self, i: usize, j: usize) -> Option<Block> {
        if i == j {
            Some(self.diag[i].clone())
        } else if i == j + 1 {
            Some(self.sub[j].clone())
        } else if j == i + 1 {
            Some(self.sub[i].transpose())
        } else {
            None
        }
    }

    /// Entry at global indices; zero outside the band.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let p = self.p;
        let (i, a) = (row / p, row % p);
        let (j, b) = (col / p, col % p);
        if i == j {
            self.diag[i][(a, b)]
        } else if i == j + 1 {
            self.sub[j][(a, b)]
        } else if j == i + 1 {
            self.sub[i][(b, a)]
        } else {
            0.0
        }
    }
}

/// Block Cholesky factorization `H = L L^T` with `L = D (I - A)`.
///
/// A failed block pivot means `H` is not positive definite; the offending time index is
/// reported.
pub fn cholesky_block(h: &BlockTriDiag) -> Result<SubDiagFactor> {
    let (n, p) = (h.n(), h.p());
    let mut d = Vec::with_capacity(n);
    let mut d_inv = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n.saturating_sub(1));

    let mut pivot = h.diag[0].clone();
    for i in 0..n {
        if pivot.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotPositiveDefinite(i));
        }
        let chol = pivot
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite(i))?;
        let di = chol.l();
        if (0..p).any(|k| di[(k, k)] <= 0.0 || !di[(k, k)].is_finite()) {
            return Err(Error::NotPositiveDefinite(i));
        }
        let di_inv = di
            .clone()
            .solve_lower_triangular(&Block::identity(p, p))
            .ok_or(Error::NotPositiveDefinite(i))?;
        if i + 1 < n {
            // E_i = Q_i D_i^{-T};  D_{i+1} D_{i+1}^T = P_{i+1} - E_i E_i^T
            let e = &h.sub[i] * di_inv.transpose();
            pivot = symmetrize(&(&h.diag[i + 1] - &e * e.transpose()));
            a.push(e);
        }
        d.push(di);
        d_inv.push(di_inv);
    }
    // A_i = -D_{i+1}^{-1} E_i
    for (i, ai) in a.iter_mut().enumerate() {
        *ai = -(&d_inv[i + 1] * &*ai);
    }
    Ok(SubDiagFactor { p, d, d_inv, a })
}

/// `log |H|` from the factor.
pub fn log_det(f: &SubDiagFactor) -> f64 {
    2.0 * f
        .d
        .iter()
        .map(|b| (0..f.p).map(|k| b[(k, k)].ln()).sum::<f64>())
        .sum::<f64>()
}

/// Backward recurrence `S_n = I`, `S_k = I + A_k^T S_{k+1} A_k`.
pub fn compute_s(a: &[Block], p: usize, n: usize) -> SBlocks {
    assert_eq!(a.len() + 1, n, "A must have n - 1 blocks");
    let mut s = vec![Block::identity(p, p); n];
    for k in (0..n.saturating_sub(1)).rev() {
        let next = &a[k].transpose() * &s[k + 1] * &a[k];
        s[k] = symmetrize(&(Block::identity(p, p) + next));
    }
    SBlocks(s)
}

/// Block-tridiagonal part of `H^{-1}`:
/// diagonal `D_i^{-T} S_i D_i^{-1}`, sub-diagonal `D_{i+1}^{-T} S_{i+1} A_i D_i^{-1}`.
pub fn near_diagonal_inverse(f: &SubDiagFactor, s: &SBlocks) -> BlockBandedSym {
    let n = f.n();
    assert_eq!(s.0.len(), n, "S must have n blocks");
    let diag = (0..n)
        .map(|i| symmetrize(&(f.d_inv[i].transpose() * &s.0[i] * &f.d_inv[i])))
        .collect();
    let sub = (0..n.saturating_sub(1))
        .map(|i| f.d_inv[i + 1].transpose() * &s.0[i + 1] * &f.a[i] * &f.d_inv[i])
        .collect();
    BlockBandedSym {
        p: f.p,
        diag,
        sub,
    }
}

fn segment(v: &[f64], i: usize, p: usize) -> DVector<f64> {
    DVector::from_column_slice(&v[i * p..(i + 1) * p])
}

/// Forward block substitution for `L x = v`: `x_0 = D_0^{-1} v_0`,
/// `x_{i+1} = D_{i+1}^{-1} v_{i+1} + A_i x_i`.
pub fn solve_lower(f: &SubDiagFactor, v: &[f64]) -> Vec<f64> {
    let (n, p) = (f.n(), f.p);
    assert_eq!(v.len(), n * p, "vector length must be n * p");
    let mut x = vec![0.0; n * p];
    let mut prev = &f.d_inv[0] * segment(v, 0, p);
    x[..p].copy_from_slice(prev.as_slice());
    for i in 1..n {
        let xi = &f.d_inv[i] * segment(v, i, p) + &f.a[i - 1] * &prev;
        x[i * p..(i + 1) * p].copy_from_slice(xi.as_slice());
        prev = xi;
    }
    x
}

/// Backward substitution for `L^T x = y` with `L^T = (I - A)^T D^T`.
pub fn solve_upper(f: &SubDiagFactor, y: &[f64]) -> Vec<f64> {
    let (n, p) = (f.n(), f.p);
    assert_eq!(y.len(), n * p, "vector length must be n * p");
    let mut x = vec![0.0; n * p];
    let mut z = segment(y, n - 1, p);
    let xn = f.d_inv[n - 1].tr_mul(&z);
    x[(n - 1) * p..].copy_from_slice(xn.as_slice());
    for i in (0..n - 1).rev() {
        z = segment(y, i, p) + f.a[i].tr_mul(&z);
        let xi = f.d_inv[i].tr_mul(&z);
        x[i * p..(i + 1) * p].copy_from_slice(xi.as_slice());
    }
    x
}

/// `H^{-1} v`.
pub fn solve(f: &SubDiagFactor, v: &[f64]) -> Vec<f64> {
    solve_upper(f, &solve_lower(f, v))
}

/// `v^T H^{-1} v = ||L^{-1} v||^2`.
pub fn quadratic_form_hinv(f: &SubDiagFactor, v: &[f64]) -> f64 {
    solve_lower(f, v).iter().map(|x| x * x).sum()
}

/// Block matrix whose only nonzero blocks sit at `(i, i + level)`.
///
/// `blocks[k]` is the block in block row `k + max(0, -level)`; there are `n - |level|` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMatrix {
    n: usize,
    p: usize,
    level: isize,
    blocks: Vec<Block>,
}

impl LevelMatrix {
    pub fn new(n: usize, p: usize, level: isize, blocks: Vec<Block>) -> Result<Self> {
        let expected = n.saturating_sub(level.unsigned_abs());
        if blocks.len() != expected {
            return Err(Error::Invalid(format!(
                "level {level} matrix with n = {n} needs {expected} blocks, got {}",
                blocks.len()
            )));
        }
        if blocks.iter().any(|b| b.shape() != (p, p)) {
            return Err(Error::Invalid(format!("all blocks must be {p}x{p}")));
        }
        Ok(Self {
            n,
            p,
            level,
            blocks,
        })
    }

    pub fn identity(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            level: 0,
            blocks: vec![Block::identity(p, p); n],
        }
    }

    /// Level -1 matrix from sub-diagonal blocks (`a[i]` at `(i + 1, i)`).
    pub fn sub_diagonal(a: &[Block], p: usize) -> Self {
        Self {
            n: a.len() + 1,
            p,
            level: -1,
            blocks: a.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn level(&self) -> isize {
        self.level
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Block in block row `row`, i.e. at `(row, row + level)`, if in range.
    pub fn block_at_row(&self, row: usize) -> Option<&Block> {
        let first = (-self.level).max(0) as usize;
        row.checked_sub(first).and_then(|k| self.blocks.get(k))
    }

    pub fn transpose(&self) -> Self {
        Self {
            n: self.n,
            p: self.p,
            level: -self.level,
            blocks: self.blocks.iter().map(|b| b.transpose()).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, p) = (self.n, self.p);
        let mut m = DMatrix::zeros(n * p, n * p);
        let first = (-self.level).max(0) as usize;
        for (k, b) in self.blocks.iter().enumerate() {
            let row = k + first;
            let col = (row as isize + self.level) as usize;
            m.view_mut((row * p, col * p), (p, p)).copy_from(b);
        }
        m
    }
}

/// Product of two single-level block matrices; the result has level `l_x + l_y`.
///
/// Blocks whose source blocks fall outside `0..n` are zero.
pub fn level_multiply(x: &LevelMatrix, y: &LevelMatrix) -> LevelMatrix {
    assert_eq!((x.n, x.p), (y.n, y.p), "operands must be conformable");
    let (n, p) = (x.n, x.p);
    let level = x.level + y.level;
    let first = (-level).max(0) as usize;
    let count = n.saturating_sub(level.unsigned_abs());
    let blocks = (0..count)
        .map(|k| {
            let row = k + first;
            let mid = row as isize + x.level;
            if mid < 0 || mid as usize >= n {
                return Block::zeros(p, p);
            }
            match (x.block_at_row(row), y.block_at_row(mid as usize)) {
                (Some(bx), Some(by)) => bx * by,
                _ => Block::zeros(p, p),
            }
        })
        .collect();
    LevelMatrix {
        n,
        p,
        level,
        blocks,
    }
}
