//! Synthetic twin-graph generator for tests and demos.
//!
//! A random base graph is built with multi-token entity names and short
//! descriptions drawn from a much smaller vocabulary, so names carry most of
//! the identity signal. The second graph is a perturbed, relabeled copy:
//! Gaussian noise on every embedding block (renormalized), independent edge
//! dropout, and a random id permutation. Gold pairs are `(i, perm[i])`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, GraphData};
use crate::embedding::{fallback_encode, EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::kg::{AlignmentSet, KnowledgeGraph, SideInfo, Triple};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    /// Mean number of triples per entity.
    pub degree: f64,
    pub name_dim: usize,
    pub desc_dim: usize,
    pub rel_dim: usize,
    pub name_vocab: usize,
    pub name_tokens: usize,
    pub desc_vocab: usize,
    pub desc_tokens: usize,
    pub sigma: f64,
    pub dropout: f64,
    pub seed: u64,
    pub descriptions: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 200,
            relations: 8,
            degree: 3.0,
            name_dim: 16,
            desc_dim: 16,
            rel_dim: 16,
            name_vocab: 400,
            name_tokens: 3,
            desc_vocab: 24,
            desc_tokens: 3,
            sigma: 0.05,
            dropout: 0.1,
            seed: 37,
            descriptions: true,
        }
    }
}

fn words(rng: &mut ChaCha8Rng, prefix: &str, vocab: usize, count: usize) -> String {
    (0..count)
        .map(|_| format!("{prefix}{}", rng.random_range(0..vocab)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Adds `N(0, σ²)` to every value of `rows` (in the order of `order`) and
/// renormalizes each row.
fn perturb(table: &EmbeddingTable, order: &[usize], sigma: f64, rng: &mut ChaCha8Rng, kind: EmbeddingKind) -> Result<EmbeddingTable> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("sigma: {e}")))?;
    let dim = table.dim();
    let mut data = vec![0f32; table.count() * dim];
    for (new_id, &base) in order.iter().enumerate() {
        let mut row: Vec<f64> = table.row(base).iter().map(|&v| v as f64).collect();
        let zero = row.iter().all(|&v| v == 0.0);
        if !zero && sigma > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        for (d, v) in data[new_id * dim..(new_id + 1) * dim].iter_mut().zip(row) {
            *d = v as f32;
        }
    }
    EmbeddingTable::new(kind, table.count(), dim, data)
}

/// Builds the twin dataset described in the module docs.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.entities < 2 || cfg.relations == 0 {
        return Err(Error::Config("synthetic graphs need at least 2 entities and 1 relation".into()));
    }
    if !(0.0..=1.0).contains(&cfg.dropout) || cfg.sigma < 0.0 {
        return Err(Error::Config("dropout must be in [0, 1] and sigma non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.entities;

    let names: Vec<String> = (0..n).map(|_| words(&mut rng, "w", cfg.name_vocab, cfg.name_tokens)).collect();
    let descs: Vec<String> = (0..n).map(|_| words(&mut rng, "d", cfg.desc_vocab, cfg.desc_tokens)).collect();
    let rel_names: Vec<String> = (0..cfg.relations).map(|r| format!("relation {r}")).collect();

    let target = (cfg.degree * n as f64).round() as usize;
    let max_edges = n * (n - 1) * cfg.relations;
    let mut edges = BTreeSet::new();
    while edges.len() < target.min(max_edges) {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        if h != t {
            edges.insert(Triple {
                head: h,
                relation: rng.random_range(0..cfg.relations),
                tail: t,
            });
        }
    }

    let seed_of = |salt: u64| cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt);
    let name_emb = fallback_encode(&names, cfg.name_dim, seed_of(1), EmbeddingKind::EntityName)?;
    let desc_emb = fallback_encode(&descs, cfg.desc_dim, seed_of(2), EmbeddingKind::EntityDescription)?;
    let rel_emb = fallback_encode(&rel_names, cfg.rel_dim, seed_of(3), EmbeddingKind::RelationName)?;

    let info = |i: usize| SideInfo {
        name: names[i].clone(),
        description: cfg.descriptions.then(|| descs[i].clone()),
    };
    let relations: Vec<SideInfo> = rel_names
        .iter()
        .map(|r| SideInfo {
            name: r.clone(),
            description: None,
        })
        .collect();
    let g1 = GraphData {
        kg: KnowledgeGraph::new((0..n).map(info).collect(), relations.clone(), edges.iter().copied().collect())?,
        names: name_emb.clone(),
        descriptions: cfg.descriptions.then(|| desc_emb.clone()),
        relation_names: rel_emb.clone(),
    };

    // perm[base] = id in G2; order[new] = base.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut order = vec![0; n];
    for (base, &new) in perm.iter().enumerate() {
        order[new] = base;
    }
    let kept: Vec<Triple> = edges
        .iter()
        .filter(|_| !rng.random_bool(cfg.dropout))
        .map(|t| Triple {
            head: perm[t.head],
            relation: t.relation,
            tail: perm[t.tail],
        })
        .collect();
    let names2 = perturb(&name_emb, &order, cfg.sigma, &mut rng, EmbeddingKind::EntityName)?;
    let descs2 = if cfg.descriptions {
        Some(perturb(&desc_emb, &order, cfg.sigma, &mut rng, EmbeddingKind::EntityDescription)?)
    } else {
        None
    };
    let g2 = GraphData {
        kg: KnowledgeGraph::new(order.iter().map(|&b| info(b)).collect(), relations, kept)?,
        names: names2,
        descriptions: descs2,
        relation_names: rel_emb,
    };
    Ok(Dataset {
        graphs: [g1, g2],
        alignments: AlignmentSet::new((0..n).map(|i| (i, perm[i])).collect()),
    })
}
