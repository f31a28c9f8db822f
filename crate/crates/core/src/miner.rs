//! Pseudo-aligned pair mining: exact L2 nearest neighbor across graphs,
//! thresholded at a strict `< λ`, merged into a two-way partner lookup.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Side};
use crate::tensor::Real;

const QUERY_CHUNK: usize = 32;
const TARGET_BLOCK: usize = 256;

/// L2 distance accumulated in f64. Mining and evaluation both use this.
pub fn l2<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// A mined pair: `source` in the source graph, `partner` in the other one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoPair {
    pub source: EntityId,
    pub partner: EntityId,
    pub distance: f64,
}

/// Mining result for one direction. `pairs` is ordered by source id and holds
/// at most one entry per source; every distance is `< λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPairSet {
    pub source: Side,
    pub epoch: usize,
    pub source_count: usize,
    pub pairs: Vec<PseudoPair>,
}

impl PseudoPairSet {
    pub fn coverage(&self) -> f64 {
        if self.source_count == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / self.source_count as f64
        }
    }
}

fn check_matrix<T>(what: &str, v: &[T], dim: usize) -> Result<usize> {
    if dim == 0 || !v.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{what}: {} values is not a multiple of dim {dim}", v.len())));
    }
    Ok(v.len() / dim)
}

/// Nearest target row for every source row: `(target id, distance)`, ties
/// going to the lowest target id. `None` only when there are no targets.
pub fn nearest<T: Real>(src: &[T], dst: &[T], dim: usize) -> Result<Vec<Option<(EntityId, f64)>>> {
    let n = check_matrix("source", src, dim)?;
    let m = check_matrix("target", dst, dim)?;
    let rows: Vec<Vec<Option<(EntityId, f64)>>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(QUERY_CHUNK)
        .map(|chunk| {
            let mut best: Vec<Option<(EntityId, f64)>> = vec![None; chunk.len()];
            for start in (0..m).step_by(TARGET_BLOCK) {
                let end = (start + TARGET_BLOCK).min(m);
                for (slot, &q) in best.iter_mut().zip(chunk) {
                    let qv = &src[q * dim..(q + 1) * dim];
                    for j in start..end {
                        let d = l2(qv, &dst[j * dim..(j + 1) * dim]);
                        // Targets are visited in increasing id order, so a
                        // strict comparison keeps the lowest id on ties.
                        if slot.is_none_or(|(_, b)| d < b) {
                            *slot = Some((j, d));
                        }
                    }
                }
            }
            best
        })
        .collect();
    Ok(rows.concat())
}

/// Mines `source → other` pairs with distance strictly below `lambda`.
pub fn mine<T: Real>(source: Side, src: &[T], dst: &[T], dim: usize, lambda: f64, epoch: usize) -> Result<PseudoPairSet> {
    if lambda.is_nan() {
        return Err(Error::Config("lambda is NaN".into()));
    }
    let best = nearest(src, dst, dim)?;
    let pairs = best
        .iter()
        .enumerate()
        .filter_map(|(i, b)| match *b {
            Some((j, d)) if d < lambda => Some(PseudoPair {
                source: i,
                partner: j,
                distance: d,
            }),
            _ => None,
        })
        .collect();
    Ok(PseudoPairSet {
        source,
        epoch,
        source_count: best.len(),
        pairs,
    })
}

/// Partner lookup for both graphs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLookup {
    partners: [Vec<Option<EntityId>>; 2],
}

impl PseudoLookup {
    /// Empty lookup (no entity has a partner).
    pub fn empty(n1: usize, n2: usize) -> Self {
        PseudoLookup {
            partners: [vec![None; n1], vec![None; n2]],
        }
    }

    /// Combines both directions. An entity's own-direction pair wins; with
    /// none, it takes the reverse pair that names it, if exactly one does;
    /// otherwise it has no partner.
    pub fn merge(g1: &PseudoPairSet, g2: &PseudoPairSet) -> Result<Self> {
        if g1.source != Side::G1 || g2.source != Side::G2 {
            return Err(Error::Contract("merge expects G1 then G2 pair sets".into()));
        }
        let n = [g1.source_count, g2.source_count];
        let mut out = PseudoLookup::empty(n[0], n[1]);
        for (own, rev) in [(g1, g2), (g2, g1)] {
            let side = own.source.index();
            let mut reverse_hits: Vec<(usize, EntityId)> = vec![(0, 0); n[side]];
            for p in &rev.pairs {
                if p.partner >= n[side] {
                    return Err(Error::Id(format!("partner {} outside {}", p.partner, own.source)));
                }
                let slot = &mut reverse_hits[p.partner];
                slot.0 += 1;
                slot.1 = p.source;
            }
            for (e, &(count, src)) in reverse_hits.iter().enumerate() {
                if count == 1 {
                    out.partners[side][e] = Some(src);
                }
            }
            for p in &own.pairs {
                if p.partner >= n[1 - side] || p.source >= n[side] {
                    return Err(Error::Id(format!("pair {p:?} out of range")));
                }
                out.partners[side][p.source] = Some(p.partner);
            }
        }
        Ok(out)
    }

    pub fn partner(&self, side: Side, e: EntityId) -> Option<EntityId> {
        self.partners[side.index()].get(e).copied().flatten()
    }

    pub fn coverage(&self, side: Side) -> f64 {
        let v = &self.partners[side.index()];
        if v.is_empty() {
            0.0
        } else {
            v.iter().filter(|p| p.is_some()).count() as f64 / v.len() as f64
        }
    }
}

/// Summary of one direction's mined distances.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningStats {
    pub coverage: f64,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

pub fn stats(set: &PseudoPairSet) -> MiningStats {
    let mut d: Vec<f64> = set.pairs.iter().map(|p| p.distance).collect();
    d.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        if d.is_empty() {
            f64::NAN
        } else {
            d[((d.len() - 1) as f64 * q).round() as usize]
        }
    };
    MiningStats {
        coverage: set.coverage(),
        mean: if d.is_empty() { f64::NAN } else { d.iter().sum::<f64>() / d.len() as f64 },
        median: pct(0.5),
        p90: pct(0.9),
    }
}
