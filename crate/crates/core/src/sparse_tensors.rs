//! Block-neighbour-sparse third- and fourth-order derivative tensors.
//!
//! Because the log-likelihood is a sum of one-point and two-point terms, the third-derivative
//! tensor `T` only has nonzero blocks `(i, j, k)` whose indices lie within one of each other,
//! and the fourth-derivative tensor `F` only where all six pairwise differences are at most one.
//!
//! `T` is stored by *level*: a level is a block offset pattern `(o1, o2, o3)` normalized so that
//! its smallest entry is zero, and the level array holds the blocks
//! `(b + o1, b + o2, b + o3)` for consecutive bases `b`. A neighbour tensor has the seven levels
//! with offsets in `{0, 1}`. Applying single-level block matrices to individual modes shifts
//! levels; results that drift more than two blocks apart across modes can never pair with a
//! neighbour tensor in an inner product and are dropped.
//!
//! `F` is only needed contracted against the band of `H^{-1}`, so it stays in local form.

use std::collections::BTreeMap;

use crate::block_linalg::{Block, BlockBandedSym, BlockTriDiag, LevelMatrix};
use crate::error::{Error, Result};

/// Dense `p x p x p` block, row-major in `(a, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block3 {
    p: usize,
    data: Vec<f64>,
}

impl Block3 {
    pub fn zeros(p: usize) -> Self {
        Self {
            p,
            data: vec![0.0; p * p * p],
        }
    }

    pub fn from_vec(p: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), p * p * p);
        Self { p, data }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.p + b) * self.p + c]
    }

    #[inline]
    pub fn add_to(&mut self, a: usize, b: usize, c: usize, x: f64) {
        self.data[(a * self.p + b) * self.p + c] += x;
    }

    pub fn add_assign(&mut self, other: &Block3) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn dot(&self, other: &Block3) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Contracts `m` (or `m^T`) into one mode: `out[.., r, ..] = sum_s m[r, s] x[.., s, ..]`.
    pub fn apply(&self, mode: usize, m: &Block, transpose: bool) -> Block3 {
        let p = self.p;
        let stride = match mode {
            0 => p * p,
            1 => p,
            2 => 1,
            _ => panic!("third-order tensors have modes 0, 1, 2"),
        };
        let mut out = Block3::zeros(p);
        for base in 0..p * p * p {
            // visit each fibre once, from its first element
            if (base / stride) % p != 0 {
                continue;
            }
            for r in 0..p {
                let mut acc = 0.0;
                for s in 0..p {
                    let coef = if transpose { m[(s, r)] } else { m[(r, s)] };
                    acc += coef * self.data[base + s * stride];
                }
                out.data[base + r * stride] = acc;
            }
        }
        out
    }

    /// Applies one matrix per mode (`None` leaves the mode untouched).
    fn apply_all(&self, ops: [Option<(&Block, bool)>; 3]) -> Block3 {
        let mut out = self.clone();
        for (mode, op) in ops.iter().enumerate() {
            if let Some((m, t)) = op {
                out = out.apply(mode, m, *t);
            }
        }
        out
    }
}

/// Level key: block offsets per mode, smallest entry zero.
pub type Offsets = [usize; 3];

/// The seven levels of a tensor whose blocks are pairwise neighbours.
pub const NEIGHBOR_LEVELS: [Offsets; 7] = [
    [0, 0, 0],
    [0, 0, 1],
    [0, 1, 0],
    [1, 0, 0],
    [0, 1, 1],
    [1, 0, 1],
    [1, 1, 0],
];

/// Largest mode-wise offset spread a derived level may have before it is discarded.
pub const MAX_LEVEL_SPREAD: usize = 2;

fn spread(o: &Offsets) -> usize {
    *o.iter().max().unwrap()
}

/// Third-order block tensor stored by level.
///
/// Tensors assembled from local derivatives carry exactly the seven neighbour levels; tensors
/// derived by [`shift_multiply3`] may carry other levels of spread at most two.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTensor3 {
    n: usize,
    p: usize,
    levels: BTreeMap<Offsets, Vec<Block3>>,
}

impl NeighborTensor3 {
    /// All seven neighbour levels, zero-filled.
    pub fn zeros(n: usize, p: usize) -> Self {
        let mut t = Self::empty(n, p);
        for o in NEIGHBOR_LEVELS {
            t.levels.insert(o, vec![Block3::zeros(p); n.saturating_sub(spread(&o))]);
        }
        t
    }

    /// No levels at all.
    pub fn empty(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            levels: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn levels(&self) -> impl Iterator<Item = (&Offsets, &Vec<Block3>)> {
        self.levels.iter()
    }

    pub fn level(&self, o: &Offsets) -> Option<&[Block3]> {
        self.levels.get(o).map(|v| v.as_slice())
    }

    fn level_mut(&mut self, o: Offsets) -> &mut Vec<Block3> {
        let (n, p) = (self.n, self.p);
        self.levels
            .entry(o)
            .or_insert_with(|| vec![Block3::zeros(p); n.saturating_sub(spread(&o))])
    }

    /// Normalizes global block indices into `(level, base)`.
    pub fn locate(i: usize, j: usize, k: usize) -> (Offsets, usize) {
        let b = i.min(j).min(k);
        ([i - b, j - b, k - b], b)
    }

    /// Mutable block `(i, j, k)`; creates its level if needed.
    pub fn block_mut(&mut self, i: usize, j: usize, k: usize) -> &mut Block3 {
        let (o, b) = Self::locate(i, j, k);
        &mut self.level_mut(o)[b]
    }

    pub fn block(&self, i: usize, j: usize, k: usize) -> Option<&Block3> {
        let (o, b) = Self::locate(i, j, k);
        self.levels.get(&o).and_then(|v| v.get(b))
    }

    pub fn add_assign(&mut self, other: &NeighborTensor3) {
        assert_eq!((self.n, self.p), (other.n, other.p));
        for (o, blocks) in &other.levels {
            let mine = self.level_mut(*o);
            for (x, y) in mine.iter_mut().zip(blocks) {
                x.add_assign(y);
            }
        }
    }

    /// Dense `N x N x N` array (row-major), `N = n p`.
    pub fn to_dense(&self) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        let big = n * p;
        let mut out = vec![0.0; big * big * big];
        for (o, blocks) in &self.levels {
            for (b, blk) in blocks.iter().enumerate() {
                let idx = [b + o[0], b + o[1], b + o[2]];
                for x in 0..p {
                    for y in 0..p {
                        for z in 0..p {
                            let g = ((idx[0] * p + x) * big + idx[1] * p + y) * big + idx[2] * p + z;
                            out[g] += blk.get(x, y, z);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Derivatives of one local term of the log-likelihood, up to the stated order.
///
/// Arrays are dense and row-major over the local variables; `third` and `fourth` are empty when
/// `order` is below 3 or 4.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDerivs {
    pub dim: usize,
    pub order: usize,
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub third: Vec<f64>,
    pub fourth: Vec<f64>,
}

impl LocalDerivs {
    pub fn zeros(dim: usize, order: usize) -> Self {
        Self {
            dim,
            order,
            value: 0.0,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
            third: if order >= 3 { vec![0.0; dim.pow(3)] } else { vec![] },
            fourth: if order >= 4 { vec![0.0; dim.pow(4)] } else { vec![] },
        }
    }

    pub fn add_assign(&mut self, other: &LocalDerivs) {
        assert_eq!(self.dim, other.dim);
        self.value += other.value;
        let pairs = [
            (&mut self.grad, &other.grad),
            (&mut self.hess, &other.hess),
            (&mut self.third, &other.third),
            (&mut self.fourth, &other.fourth),
        ];
        for (mine, theirs) in pairs {
            if mine.len() == theirs.len() {
                for (x, y) in mine.iter_mut().zip(theirs.iter()) {
                    *x += y;
                }
            }
        }
    }
}

/// Per-interval and per-point derivative arrays that implicitly define the global `H`, `T`, `F`.
///
/// `intervals[i]` covers the `2p` variables `(y_i, y_{i+1})`; `nodes[i]` covers the `p`
/// variables of `y_i` (data terms plus any coordinate-transform Jacobian).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTensorBundle {
    n: usize,
    p: usize,
    pub intervals: Vec<LocalDerivs>,
    pub nodes: Vec<LocalDerivs>,
}

impl LocalTensorBundle {
    pub fn new(p: usize, intervals: Vec<LocalDerivs>, nodes: Vec<LocalDerivs>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 || p == 0 {
            return Err(Error::Invalid("bundle needs n >= 1 and p >= 1".into()));
        }
        if intervals.len() != n - 1 {
            return Err(Error::Invalid(format!(
                "bundle with {n} points needs {} intervals, got {}",
                n - 1,
                intervals.len()
            )));
        }
        if intervals.iter().any(|d| d.dim != 2 * p) || nodes.iter().any(|d| d.dim != p) {
            return Err(Error::Invalid("local derivative dimensions do not match p".into()));
        }
        Ok(Self {
            n,
            p,
            intervals,
            nodes,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Lowest derivative order available across all local terms.
    pub fn order(&self) -> usize {
        self.intervals
            .iter()
            .chain(&self.nodes)
            .map(|d| d.order)
            .min()
            .unwrap_or(0)
    }

    pub fn value(&self) -> f64 {
        self.intervals.iter().map(|d| d.value).sum::<f64>()
            + self.nodes.iter().map(|d| d.value).sum::<f64>()
    }

    pub fn gradient(&self) -> Vec<f64> {
        let p = self.p;
        let mut g = vec![0.0; self.n * p];
        for (i, d) in self.intervals.iter().enumerate() {
            for a in 0..2 * p {
                g[i * p + a] += d.grad[a];
            }
        }
        for (i, d) in self.nodes.iter().enumerate() {
            for a in 0..p {
                g[i * p + a] += d.grad[a];
            }
        }
        g
    }

    pub fn hessian(&self) -> Result<BlockTriDiag> {
        let (n, p) = (self.n, self.p);
        let mut diag = vec![Block::zeros(p, p); n];
        let mut sub = vec![Block::zeros(p, p); n - 1];
        for (i, d) in self.intervals.iter().enumerate() {
            let m = 2 * p;
            for a in 0..m {
                for b in 0..m {
                    let h = d.hess[a * m + b];
                    match (a / p, b / p) {
                        (0, 0) => diag[i][(a, b)] += h,
                        (1, 1) => diag[i + 1][(a - p, b - p)] += h,
                        (1, 0) => sub[i][(a - p, b)] += h,
                        _ => {}
                    }
                }
            }
        }
        for (i, d) in self.nodes.iter().enumerate() {
            for a in 0..p {
                for b in 0..p {
                    diag[i][(a, b)] += d.hess[a * p + b];
                }
            }
        }
        BlockTriDiag::new(diag, sub)
    }
}

/// Sums the local third-order arrays into level form.
///
/// Contributions are added intervals first (ascending), then points (ascending).
pub fn assemble_tensor3(bundle: &LocalTensorBundle) -> NeighborTensor3 {
    let (n, p) = (bundle.n, bundle.p);
    assert!(bundle.order() >= 3, "bundle lacks third derivatives");
    let mut t = NeighborTensor3::zeros(n, p);
    for (i, d) in bundle.intervals.iter().enumerate() {
        let m = 2 * p;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    let x = d.third[(a * m + b) * m + c];
                    if x != 0.0 {
                        t.block_mut(i + a / p, i + b / p, i + c / p)
                            .add_to(a % p, b % p, c % p, x);
                    }
                }
            }
        }
    }
    for (i, d) in bundle.nodes.iter().enumerate() {
        let blk = t.block_mut(i, i, i);
        for a in 0..p {
            for b in 0..p {
                for c in 0..p {
                    let x = d.third[(a * p + b) * p + c];
                    if x != 0.0 {
                        blk.add_to(a, b, c, x);
                    }
                }
            }
        }
    }
    t
}

/// How a block-diagonal matrix acts on one mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeOp {
    Identity,
    Apply,
    ApplyTransposed,
}

/// Applies the block-diagonal matrix with blocks `m` (or its transpose) to the requested modes.
/// Levels are unchanged.
pub fn mode_transform3(t: &NeighborTensor3, m: &[Block], ops: [ModeOp; 3]) -> NeighborTensor3 {
    assert_eq!(m.len(), t.n, "block-diagonal matrix must have n blocks");
    let mut out = NeighborTensor3::empty(t.n, t.p);
    for (o, blocks) in &t.levels {
        let transformed = blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let op = |mode: usize| match ops[mode] {
                    ModeOp::Identity => None,
                    ModeOp::Apply => Some((&m[b + o[mode]], false)),
                    ModeOp::ApplyTransposed => Some((&m[b + o[mode]], true)),
                };
                blk.apply_all([op(0), op(1), op(2)])
            })
            .collect();
        out.levels.insert(*o, transformed);
    }
    out
}

/// Applies one single-level block matrix per mode (`None` is the identity), contracting the
/// tensor index against the matrix row index: `X'_{..c'..} = sum_c M_{c c'} X_{..c..}`.
///
/// A level-`l` matrix has blocks at `(r, r + l)`, so each mode's offset moves by `l` and the
/// result level is the mode-wise sum of levels. Blocks whose indices leave `0..n` vanish, and
/// levels whose spread exceeds [`MAX_LEVEL_SPREAD`] are discarded. To act with `M` in the usual
/// left sense, pass `M.transpose()`.
pub fn shift_multiply3(t: &NeighborTensor3, ops: [Option<&LevelMatrix>; 3]) -> NeighborTensor3 {
    let (n, p) = (t.n, t.p);
    for m in ops.iter().flatten() {
        assert_eq!((m.n(), m.p()), (n, p), "operator shape mismatch");
    }
    let shifts: [isize; 3] = std::array::from_fn(|k| ops[k].map_or(0, |m| m.level()));
    let mut out = NeighborTensor3::empty(n, p);
    for (o, blocks) in &t.levels {
        let shifted: [isize; 3] = std::array::from_fn(|k| o[k] as isize + shifts[k]);
        let lo = *shifted.iter().min().unwrap();
        let new_o: Offsets = std::array::from_fn(|k| (shifted[k] - lo) as usize);
        if spread(&new_o) > MAX_LEVEL_SPREAD {
            continue;
        }
        for (b, blk) in blocks.iter().enumerate() {
            let new_base = b as isize + lo;
            if new_base < 0 || new_base as usize + spread(&new_o) >= n {
                continue;
            }
            let mut mats: [Option<(&Block, bool)>; 3] = [None; 3];
            let mut alive = true;
            for k in 0..3 {
                if let Some(m) = ops[k] {
                    match m.block_at_row(b + o[k]) {
                        Some(blk) => mats[k] = Some((blk, true)),
                        None => alive = false,
                    }
                }
            }
            if !alive {
                continue;
            }
            let res = blk.apply_all(mats);
            out.level_mut(new_o)[new_base as usize].add_assign(&res);
        }
    }
    out
}

/// `<P, Q> = P_{abc} Q_{abc}`, summed over levels present in both.
pub fn inner_product3(a: &NeighborTensor3, b: &NeighborTensor3) -> f64 {
    assert_eq!((a.n, a.p), (b.n, b.p), "tensor shapes differ");
    a.levels
        .iter()
        .filter_map(|(o, xs)| b.levels.get(o).map(|ys| (xs, ys)))
        .map(|(xs, ys)| xs.iter().zip(ys).map(|(x, y)| x.dot(y)).sum::<f64>())
        .sum()
}

/// `sum_q (A^q x A^q x A^q)(T)` by the forward per-level recurrence
/// `S_b = T_b + (A ⊗ A ⊗ A) S_{b-1}`, where `a[i]` is block `(i + 1, i)`.
pub fn s_recurrence(t: &NeighborTensor3, a: &[Block]) -> NeighborTensor3 {
    assert_eq!(a.len() + 1, t.n, "A must have n - 1 blocks");
    let mut out = NeighborTensor3::empty(t.n, t.p);
    for (o, blocks) in &t.levels {
        let mut acc: Vec<Block3> = Vec::with_capacity(blocks.len());
        for (b, blk) in blocks.iter().enumerate() {
            let mut s = blk.clone();
            if b >= 1 {
                let carried = acc[b - 1].apply_all([
                    Some((&a[b + o[0] - 1], false)),
                    Some((&a[b + o[1] - 1], false)),
                    Some((&a[b + o[2] - 1], false)),
                ]);
                s.add_assign(&carried);
            }
            acc.push(s);
        }
        out.levels.insert(*o, acc);
    }
    out
}

/// `v_c = sum_{a,b} H^{-1}_{ab} T_{abc}` using only the band of `H^{-1}`.
pub fn contract_tensor3_with_banded(t: &NeighborTensor3, hinv: &BlockBandedSym) -> Vec<f64> {
    let (n, p) = (t.n, t.p);
    assert_eq!((hinv.n(), hinv.p()), (n, p));
    let mut v = vec![0.0; n * p];
    for (o, blocks) in &t.levels {
        if o[0].abs_diff(o[1]) > 1 {
            debug_assert!(blocks.iter().all(Block3::is_zero), "level outside the band");
            continue;
        }
        for (b, blk) in blocks.iter().enumerate() {
            let (i, j, k) = (b + o[0], b + o[1], b + o[2]);
            let h = hinv.block(i, j).expect("within band");
            for x in 0..p {
                for y in 0..p {
                    let hxy = h[(x, y)];
                    if hxy == 0.0 {
                        continue;
                    }
                    for z in 0..p {
                        v[k * p + z] += hxy * blk.get(x, y, z);
                    }
                }
            }
        }
    }
    v
}

fn local_pair_inverse(hinv: &BlockBandedSym, i: usize) -> Block {
    let p = hinv.p();
    let mut h = Block::zeros(2 * p, 2 * p);
    h.view_mut((0, 0), (p, p)).copy_from(&hinv.diag()[i]);
    h.view_mut((p, p), (p, p)).copy_from(&hinv.diag()[i + 1]);
    h.view_mut((p, 0), (p, p)).copy_from(&hinv.sub()[i]);
    h.view_mut((0, p), (p, p)).copy_from(&hinv.sub()[i].transpose());
    h
}

fn contract4_local(f: &[f64], h: &Block) -> f64 {
    let m = h.nrows();
    let mut total = 0.0;
    for a in 0..m {
        for b in 0..m {
            let hab = h[(a, b)];
            if hab == 0.0 {
                continue;
            }
            let base = (a * m + b) * m * m;
            let mut inner = 0.0;
            for c in 0..m {
                for d in 0..m {
                    inner += f[base + c * m + d] * h[(c, d)];
                }
            }
            total += hab * inner;
        }
    }
    total
}

/// `F_{abcd} H^{-1}_{ab} H^{-1}_{cd}`, each local fourth-order entry contracted once against the
/// band of `H^{-1}`.
pub fn contract_tensor4_with_banded(bundle: &LocalTensorBundle, hinv: &BlockBandedSym) -> f64 {
    assert!(bundle.order() >= 4, "bundle lacks fourth derivatives");
    assert_eq!((hinv.n(), hinv.p()), (bundle.n, bundle.p));
    let intervals: f64 = bundle
        .intervals
        .iter()
        .enumerate()
        .map(|(i, d)| contract4_local(&d.fourth, &local_pair_inverse(hinv, i)))
        .sum();
    let nodes: f64 = bundle
        .nodes
        .iter()
        .enumerate()
        .map(|(i, d)| contract4_local(&d.fourth, &hinv.diag()[i]))
        .sum();
    intervals + nodes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_mode_multiply, random_block3, random_bundle, random_neighbor_tensor};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn assert_dense_close(a: &[f64], b: &[f64], rel: f64) {
        let scale = max_abs(b).max(1e-300);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rel * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_bundle_gives_zero_levels() {
        let bundle = LocalTensorBundle::new(
            2,
            vec![LocalDerivs::zeros(4, 4); 3],
            vec![LocalDerivs::zeros(2, 4); 4],
        )
        .unwrap();
        let t = assemble_tensor3(&bundle);
        assert_eq!(t.levels().count(), 7);
        assert!(t.levels().all(|(_, bs)| bs.iter().all(Block3::is_zero)));
    }

    #[test]
    fn single_entry_lands_in_expected_level() {
        let p = 2;
        let mut d = LocalDerivs::zeros(2 * p, 4);
        let m = 2 * p;
        d.third[(0 * m + p) * m + 0] = 3.5;
        let bundle =
            LocalTensorBundle::new(p, vec![d], vec![LocalDerivs::zeros(p, 4); 2]).unwrap();
        let t = assemble_tensor3(&bundle);
        let lvl = t.level(&[0, 1, 0]).unwrap();
        assert_eq!(lvl.len(), 1);
        assert_eq!(lvl[0].get(0, 0, 0), 3.5);
        let nonzero: usize = t
            .levels()
            .map(|(_, bs)| bs.iter().map(|b| b.as_slice().iter().filter(|x| **x != 0.0).count()).sum::<usize>())
            .sum();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn assembly_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bundle = random_bundle(4, 2, &mut rng);
        let t = assemble_tensor3(&bundle);
        let dense = crate::oracle::dense_third(&bundle);
        assert_eq!(t.to_dense(), dense);
    }

    #[test]
    fn assembled_tensor_respects_neighbour_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, p) = (5, 2);
        let bundle = random_bundle(n, p, &mut rng);
        let dense_t = crate::oracle::dense_third(&bundle);
        let dense_f = crate::oracle::dense_fourth(&bundle);
        let big = n * p;
        for a in 0..big {
            for b in 0..big {
                for c in 0..big {
                    let blocks = [a / p, b / p, c / p];
                    let far = blocks.iter().max().unwrap() - blocks.iter().min().unwrap() > 1;
                    if far {
                        assert_eq!(dense_t[(a * big + b) * big + c], 0.0);
                    }
                    for d in 0..big {
                        let bl = [a / p, b / p, c / p, d / p];
                        let far4 = bl.iter().max().unwrap() - bl.iter().min().unwrap() > 1;
                        if far4 {
                            assert_eq!(dense_f[((a * big + b) * big + c) * big + d], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mode_transform_identity_and_scalar_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_neighbor_tensor(3, 2, &mut rng);
        let eye = vec![Block::identity(2, 2); 3];
        let all = [ModeOp::Apply; 3];
        assert_eq!(mode_transform3(&t, &eye, all), t);

        let mut t1 = NeighborTensor3::zeros(2, 1);
        t1.block_mut(0, 0, 0).add_to(0, 0, 0, 1.0);
        t1.block_mut(1, 1, 1).add_to(0, 0, 0, 1.0);
        let m = vec![Block::from_element(1, 1, 2.0), Block::from_element(1, 1, 3.0)];
        let out = mode_transform3(&t1, &m, all);
        assert_eq!(out.block(0, 0, 0).unwrap().get(0, 0, 0), 8.0);
        assert_eq!(out.block(1, 1, 1).unwrap().get(0, 0, 0), 27.0);
    }

    #[test]
    fn mode_transform_matches_dense_and_keeps_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, p) = (3, 2);
        let t = random_neighbor_tensor(n, p, &mut rng);
        let m: Vec<Block> = (0..n)
            .map(|_| Block::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let mut dense_m = DMatrix::zeros(n * p, n * p);
        for (i, b) in m.iter().enumerate() {
            dense_m.view_mut((i * p, i * p), (p, p)).copy_from(b);
        }
        let ops = [ModeOp::Apply, ModeOp::ApplyTransposed, ModeOp::Identity];
        let out = mode_transform3(&t, &m, ops);
        let keys: Vec<_> = out.levels().map(|(o, _)| *o).collect();
        let orig: Vec<_> = t.levels().map(|(o, _)| *o).collect();
        assert_eq!(keys, orig);
        let expected = dense_mode_multiply(
            &t.to_dense(),
            n * p,
            [Some(dense_m.clone()), Some(dense_m.transpose()), None],
        );
        assert_dense_close(&out.to_dense(), &expected, 1e-10);
    }

    #[test]
    fn shift_multiply_scalar_example() {
        let mut t = NeighborTensor3::empty(3, 1);
        for (i, v) in [2.0, 3.0, 5.0].iter().enumerate() {
            t.block_mut(i, i, i).add_to(0, 0, 0, *v);
        }
        let a = LevelMatrix::sub_diagonal(
            &[Block::from_element(1, 1, 7.0), Block::from_element(1, 1, 11.0)],
            1,
        );
        let out = shift_multiply3(&t, [None, None, Some(&a)]);
        // level (0, 0, -1) normalizes to (1, 1, 0): blocks (1,1,0) and (2,2,1)
        let lvl = out.level(&[1, 1, 0]).unwrap();
        assert_eq!(lvl.len(), 2);
        assert_eq!(lvl[0].get(0, 0, 0), 3.0 * 7.0);
        assert_eq!(lvl[1].get(0, 0, 0), 5.0 * 11.0);
        assert_eq!(out.levels().count(), 1);
    }

    #[test]
    fn shift_multiply_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_neighbor_tensor(4, 2, &mut rng);
        let eye = LevelMatrix::identity(4, 2);
        assert_eq!(shift_multiply3(&t, [Some(&eye), Some(&eye), Some(&eye)]), t);
    }

    #[test]
    fn shift_multiply_matches_dense_and_adds_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, p) = (4, 2);
        let t = random_neighbor_tensor(n, p, &mut rng);
        let mut rl = |level: isize| {
            let blocks = (0..n - level.unsigned_abs())
                .map(|_| Block::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            LevelMatrix::new(n, p, level, blocks).unwrap()
        };
        let cases = [
            [Some(rl(-1)), None, None],
            [None, Some(rl(1)), Some(rl(-1))],
            [Some(rl(0)), Some(rl(-1)), Some(rl(-2))],
            [None, Some(rl(-2)), Some(rl(-1))],
        ];
        for ops in &cases {
            let out = shift_multiply3(&t, [ops[0].as_ref(), ops[1].as_ref(), ops[2].as_ref()]);
            for (o, _) in out.levels() {
                assert!(o.iter().max().unwrap() <= &MAX_LEVEL_SPREAD);
            }
            let dense_ops = [0, 1, 2].map(|k| ops[k].as_ref().map(|m| m.to_dense().transpose()));
            let mut expected = dense_mode_multiply(&t.to_dense(), n * p, dense_ops);
            // levels beyond the kept spread are dropped by contract
            let big = n * p;
            for a in 0..big {
                for b in 0..big {
                    for c in 0..big {
                        let bl = [a / p, b / p, c / p];
                        if bl.iter().max().unwrap() - bl.iter().min().unwrap() > MAX_LEVEL_SPREAD {
                            expected[(a * big + b) * big + c] = 0.0;
                        }
                    }
                }
            }
            assert_dense_close(&out.to_dense(), &expected, 1e-10);
        }
    }

    #[test]
    fn single_level_shift_adds_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, p) = (6, 1);
        let mut t = NeighborTensor3::empty(n, p);
        for b in 0..n - 1 {
            *t.block_mut(b, b + 1, b) = random_block3(p, &mut rng);
        }
        let a = LevelMatrix::sub_diagonal(
            &(0..n - 1).map(|_| Block::from_element(1, 1, 0.5)).collect::<Vec<_>>(),
            p,
        );
        let out = shift_multiply3(&t, [Some(&a), None, None]);
        // (0,1,0) plus level -1 on mode 0 -> (-1,1,0) -> (0,2,1)
        assert_eq!(out.levels().map(|(o, _)| *o).collect::<Vec<_>>(), vec![[0, 2, 1]]);
    }

    #[test]
    fn inner_product_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, p) = (4, 2);
        let a = random_neighbor_tensor(n, p, &mut rng);
        let b = random_neighbor_tensor(n, p, &mut rng);
        assert_eq!(inner_product3(&a, &NeighborTensor3::zeros(n, p)), 0.0);
        assert!(inner_product3(&a, &a) > 0.0);
        assert_eq!(inner_product3(&NeighborTensor3::zeros(n, p), &NeighborTensor3::zeros(n, p)), 0.0);
        let dense: f64 = a.to_dense().iter().zip(b.to_dense()).map(|(x, y)| x * y).sum();
        assert_relative_eq!(inner_product3(&a, &b), dense, max_relative = 1e-12);
    }

    #[test]
    fn s_recurrence_scalar_example() {
        let (t1, t2, a) = (1.5, -0.5, 0.8);
        let mut t = NeighborTensor3::zeros(2, 1);
        t.block_mut(0, 0, 0).add_to(0, 0, 0, t1);
        t.block_mut(1, 1, 1).add_to(0, 0, 0, t2);
        let s = s_recurrence(&t, &[Block::from_element(1, 1, a)]);
        let lvl = s.level(&[0, 0, 0]).unwrap();
        assert_eq!(lvl[0].get(0, 0, 0), t1);
        assert_relative_eq!(lvl[1].get(0, 0, 0), t2 + a * a * a * t1);

        let zero = vec![Block::zeros(1, 1)];
        assert_eq!(s_recurrence(&t, &zero), t);
    }

    #[test]
    fn s_recurrence_matches_dense_series_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, p) = (5, 2);
        let t = random_neighbor_tensor(n, p, &mut rng);
        let a: Vec<Block> = (0..n - 1)
            .map(|_| Block::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let s = s_recurrence(&t, &a);
        let am = LevelMatrix::sub_diagonal(&a, p).to_dense();
        let big = n * p;
        let mut expected = vec![0.0; big.pow(3)];
        let mut power = DMatrix::identity(big, big);
        for _ in 0..n {
            let term = dense_mode_multiply(
                &t.to_dense(),
                big,
                [Some(power.clone()), Some(power.clone()), Some(power.clone())],
            );
            for (e, x) in expected.iter_mut().zip(term) {
                *e += x;
            }
            power = &am * power;
        }
        assert_dense_close(&s.to_dense(), &expected, 1e-10);

        let lvl = LevelMatrix::sub_diagonal(&a, p).transpose();
        let mut rhs = shift_multiply3(&s, [Some(&lvl), Some(&lvl), Some(&lvl)]);
        rhs.add_assign(&t);
        assert_dense_close(&rhs.to_dense(), &s.to_dense(), 1e-10);
    }

    #[test]
    fn contractions_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, p) = (4, 2);
        let bundle = random_bundle(n, p, &mut rng);
        let h = bundle.hessian().unwrap();
        let f = crate::block_linalg::cholesky_block(&h).unwrap();
        let hinv = crate::block_linalg::near_diagonal_inverse(&f, &f.s_blocks());
        let full_inv = h.to_dense().try_inverse().unwrap();
        let big = n * p;

        let t = assemble_tensor3(&bundle);
        let v = contract_tensor3_with_banded(&t, &hinv);
        let dense_t = t.to_dense();
        let mut expected = vec![0.0; big];
        for a in 0..big {
            for b in 0..big {
                for c in 0..big {
                    expected[c] += full_inv[(a, b)] * dense_t[(a * big + b) * big + c];
                }
            }
        }
        assert_dense_close(&v, &expected, 1e-9);

        let dense_f = crate::oracle::dense_fourth(&bundle);
        let mut e4 = 0.0;
        for a in 0..big {
            for b in 0..big {
                for c in 0..big {
                    for d in 0..big {
                        e4 += dense_f[((a * big + b) * big + c) * big + d]
                            * full_inv[(a, b)]
                            * full_inv[(c, d)];
                    }
                }
            }
        }
        assert_relative_eq!(contract_tensor4_with_banded(&bundle, &hinv), e4, max_relative = 1e-9);
    }

    #[test]
    fn scalar_contractions() {
        let (c3, c4, h) = (0.7, -1.3, 0.4);
        let mut d = LocalDerivs::zeros(1, 4);
        d.third[0] = c3;
        d.fourth[0] = c4;
        let bundle = LocalTensorBundle::new(1, vec![], vec![d]).unwrap();
        let hinv = BlockBandedSym::new(vec![Block::from_element(1, 1, h)], vec![]).unwrap();
        let t = assemble_tensor3(&bundle);
        assert_relative_eq!(contract_tensor3_with_banded(&t, &hinv)[0], c3 * h);
        assert_relative_eq!(contract_tensor4_with_banded(&bundle, &hinv), c4 * h * h);
        assert_eq!(
            contract_tensor3_with_banded(&NeighborTensor3::zeros(1, 1), &hinv),
            vec![0.0]
        );
    }

    #[test]
    fn bundle_rejects_bad_shapes() {
        assert!(LocalTensorBundle::new(2, vec![], vec![]).is_err());
        assert!(LocalTensorBundle::new(2, vec![], vec![LocalDerivs::zeros(2, 2); 2]).is_err());
        assert!(LocalTensorBundle::new(
            2,
            vec![LocalDerivs::zeros(3, 2)],
            vec![LocalDerivs::zeros(2, 2); 2]
        )
        .is_err());
    }
}
