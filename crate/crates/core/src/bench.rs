//! Stage timings of the expansion on random block-tridiagonal problems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::laplace_core::{expansion_terms, Order, StageTimes};
use crate::oracle::random_bundle;

/// Median stage times in seconds for one problem size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub t_factor: f64,
    pub t_s: f64,
    pub t_iv: f64,
    pub t_iiia: f64,
    pub t_iiib: f64,
    pub t_total: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Times every stage of the higher-order expansion for each `n` at block size `p`, taking the
/// median over `repeats` runs on one random instance per size.
pub fn bench_sizes(sizes: &[usize], p: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if p == 0 || repeats == 0 || sizes.iter().any(|&n| n < 2) {
        return Err(Error::Invalid("bench needs n >= 2, p >= 1 and at least one repeat".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let bundle = random_bundle(n, p, &mut rng);
            let runs = (0..repeats)
                .map(|_| expansion_terms(0.0, &bundle, Order::Higher).map(|(_, t)| t))
                .collect::<Result<Vec<StageTimes>>>()?;
            let pick = |f: fn(&StageTimes) -> f64| median(runs.iter().map(f).collect());
            Ok(BenchRow {
                n,
                p,
                t_factor: pick(|t| t.factor),
                t_s: pick(|t| t.s),
                t_iv: pick(|t| t.iv),
                t_iiia: pick(|t| t.iiia),
                t_iiib: pick(|t| t.iiib),
                t_total: pick(|t| t.total),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_size() {
        let rows = bench_sizes(&[8], 2, 3, 1).unwrap();
        assert_eq!(rows.len(), 1);
        let r = rows[0];
        assert_eq!((r.n, r.p), (8, 2));
        assert!(r.t_total >= 0.0 && r.t_total.is_finite());
        assert!(bench_sizes(&[1], 2, 1, 1).is_err());
    }
}
