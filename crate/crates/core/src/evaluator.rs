//! Ranking evaluation: Hits@N, mean rank and MRR by L2 distance.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::AlignmentSet;
use crate::miner::l2;
use crate::tensor::Real;

pub const DEFAULT_NS: [usize; 2] = [1, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub direction: String,
    /// Rank of the gold counterpart for each query, in gold order.
    pub ranks: Vec<usize>,
    pub candidates: usize,
    pub hits: Vec<(usize, f64)>,
}

impl RankingResult {
    pub fn hits_at(&self, n: usize) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        self.ranks.iter().filter(|&&r| r <= n).count() as f64 / self.ranks.len() as f64
    }

    pub fn mean_rank(&self) -> f64 {
        if self.ranks.is_empty() {
            return f64::NAN;
        }
        self.ranks.iter().sum::<usize>() as f64 / self.ranks.len() as f64
    }

    pub fn mrr(&self) -> f64 {
        if self.ranks.is_empty() {
            return f64::NAN;
        }
        self.ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / self.ranks.len() as f64
    }

    /// `direction,N,hits,queries` rows, without a header.
    pub fn csv_rows(&self) -> String {
        self.hits
            .iter()
            .map(|(n, h)| format!("{},{},{:.6},{}\n", self.direction, n, h, self.ranks.len()))
            .collect()
    }
}

impl fmt::Display for RankingResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8} queries={:<6}", self.direction, self.ranks.len())?;
        for (n, h) in &self.hits {
            write!(f, " Hits@{n}={:.4}", h)?;
        }
        write!(f, " MR={:.2} MRR={:.4}", self.mean_rank(), self.mrr())
    }
}

/// Ranks, for each gold pair `(a, b)`, candidate `b` among all rows of `v2`
/// by L2 distance to row `a` of `v1`. A candidate is ahead of `b` when it is
/// strictly closer, or equally close with a lower id.
pub fn evaluate<T: Real>(
    direction: &str,
    v1: &[T],
    v2: &[T],
    dim: usize,
    gold: &AlignmentSet,
    ns: &[usize],
) -> Result<RankingResult> {
    if dim == 0 || !v1.len().is_multiple_of(dim) || !v2.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("embeddings are not multiples of dim {dim}")));
    }
    let (n1, n2) = (v1.len() / dim, v2.len() / dim);
    gold.validate(n1, n2)?;
    let ranks = gold
        .pairs
        .par_iter()
        .map(|&(a, b)| {
            let q = &v1[a * dim..(a + 1) * dim];
            let row = |j: usize| &v2[j * dim..(j + 1) * dim];
            let target = l2(q, row(b));
            1 + (0..n2)
                .filter(|&j| {
                    if j == b {
                        return false;
                    }
                    let d = l2(q, row(j));
                    d < target || (d == target && j < b)
                })
                .count()
        })
        .collect::<Vec<_>>();
    let mut result = RankingResult {
        direction: direction.to_string(),
        ranks,
        candidates: n2,
        hits: Vec::new(),
    };
    result.hits = ns.iter().map(|&n| (n, result.hits_at(n))).collect();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> AlignmentSet {
        AlignmentSet::new((0..n).map(|i| (i, i)).collect())
    }

    #[test]
    fn exact_counterparts_give_perfect_hits() {
        let v: Vec<f64> = (0..20).map(|i| (i * 10) as f64).collect();
        let r = evaluate("G1->G2", &v, &v, 2, &identity(10), &DEFAULT_NS).unwrap();
        assert_eq!(r.hits_at(1), 1.0);
        assert_eq!(r.mrr(), 1.0);
    }

    #[test]
    fn decoy_always_second() {
        // Query i at x=10i; its counterpart at 10i+1 and a decoy at 10i+0.5.
        let n = 12;
        let v1: Vec<f64> = (0..n).map(|i| 10.0 * i as f64).collect();
        let mut v2 = Vec::new();
        for i in 0..n {
            v2.push(10.0 * i as f64 + 1.0);
        }
        for i in 0..n {
            v2.push(10.0 * i as f64 + 0.5);
        }
        let r = evaluate("G1->G2", &v1, &v2, 1, &identity(n), &DEFAULT_NS).unwrap();
        assert_eq!(r.hits_at(1), 0.0);
        assert_eq!(r.hits_at(10), 1.0);
        assert!(r.ranks.iter().all(|&x| x == 2));
    }

    #[test]
    fn ties_rank_lower_id_first() {
        let v1 = [0.0];
        let v2 = [1.0, -1.0];
        let a = evaluate("d", &v1, &v2, 1, &AlignmentSet::new(vec![(0, 0)]), &[1]).unwrap();
        let b = evaluate("d", &v1, &v2, 1, &AlignmentSet::new(vec![(0, 1)]), &[1]).unwrap();
        assert_eq!((a.ranks[0], b.ranks[0]), (1, 2));
    }

    #[test]
    fn missing_row_is_an_id_error() {
        let r = evaluate("d", &[0.0], &[0.0], 1, &AlignmentSet::new(vec![(0, 3)]), &[1]);
        assert!(matches!(r, Err(Error::Id(_))));
    }

    #[test]
    fn monotone_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v1: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let v2: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let r = evaluate("d", &v1, &v2, 3, &identity(20), &[1, 5, 10, 20]).unwrap();
        let h: Vec<f64> = r.hits.iter().map(|x| x.1).collect();
        assert!(h.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.hits_at(20), 1.0);
        assert!(r.ranks.iter().all(|&x| (1..=20).contains(&x)));
    }

    #[test]
    fn random_embeddings_hit_at_chance() {
        // Hits@1 over `trials` independent random instances is Binomial(q, 1/n)/q.
        let (n, dim, trials) = (20usize, 4usize, 60usize);
        let mut hits = 0.0;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
            let v1: Vec<f64> = (0..n * dim).map(|_| rng.random()).collect();
            let v2: Vec<f64> = (0..n * dim).map(|_| rng.random()).collect();
            hits += evaluate("d", &v1, &v2, dim, &identity(n), &[1]).unwrap().hits_at(1) * n as f64;
        }
        let q = (n * trials) as f64;
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / q).sqrt();
        assert!((hits / q - p).abs() < 3.0 * sigma, "{} vs {p}", hits / q);
    }

    #[test]
    fn candidate_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v1: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let v2: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let gold = identity(10);
        let base = evaluate("d", &v1, &v2, 3, &gold, &[1, 10]).unwrap();
        // Reverse the candidate rows and relabel gold accordingly.
        let mut rev = Vec::new();
        for j in (0..10).rev() {
            rev.extend_from_slice(&v2[j * 3..(j + 1) * 3]);
        }
        let gold_rev = AlignmentSet::new((0..10).map(|i| (i, 9 - i)).collect());
        let other = evaluate("d", &v1, &rev, 3, &gold_rev, &[1, 10]).unwrap();
        assert_eq!(base.ranks, other.ranks);
    }
}
