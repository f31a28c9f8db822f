//! Knowledge graph loading, validation and one-hop neighborhoods.
//!
//! Entities and relations carry dense ids `0..n`. Neighborhoods ignore edge
//! direction and list every relation that connects a pair of entities.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

/// Which of the two graphs an entity or batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    G1,
    G2,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::G1 => Side::G2,
            Side::G2 => Side::G1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::G1 => 0,
            Side::G2 => 1,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::G1 => "G1",
            Side::G2 => "G2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideInfo {
    pub name: String,
    pub description: Option<String>,
}

/// One entry of an entity's neighborhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbor {
    pub entity: EntityId,
    /// Every relation linking the pair, in either direction, ascending.
    pub relations: Vec<RelationId>,
}

/// Counters collected while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub duplicate_triples: usize,
    pub self_loops: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub entities: Vec<SideInfo>,
    pub relations: Vec<SideInfo>,
    pub triples: Vec<Triple>,
    neighborhoods: Vec<Vec<Neighbor>>,
    pub stats: LoadStats,
}

/// Truncation order applied when a neighborhood exceeds the cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborOrder {
    #[default]
    AscendingId,
    HighestDegreeFirst,
}

impl std::str::FromStr for NeighborOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending-id" => Ok(NeighborOrder::AscendingId),
            "highest-degree" => Ok(NeighborOrder::HighestDegreeFirst),
            other => Err(Error::Config(format!("unknown neighbor order `{other}`"))),
        }
    }
}

impl std::fmt::Display for NeighborOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NeighborOrder::AscendingId => "ascending-id",
            NeighborOrder::HighestDegreeFirst => "highest-degree",
        })
    }
}

impl KnowledgeGraph {
    /// Builds a graph from in-memory parts. Duplicate triples are dropped and
    /// counted; ids are validated.
    pub fn new(entities: Vec<SideInfo>, relations: Vec<SideInfo>, triples: Vec<Triple>) -> Result<Self> {
        let n = entities.len();
        let r = relations.len();
        let mut stats = LoadStats::default();
        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(triples.len());
        for t in triples {
            if t.head >= n || t.tail >= n {
                return Err(Error::Integrity(format!(
                    "triple ({}, {}, {}) references an entity outside 0..{n}",
                    t.head, t.relation, t.tail
                )));
            }
            if t.relation >= r {
                return Err(Error::Integrity(format!(
                    "triple ({}, {}, {}) references a relation outside 0..{r}",
                    t.head, t.relation, t.tail
                )));
            }
            if !seen.insert(t) {
                stats.duplicate_triples += 1;
                continue;
            }
            if t.head == t.tail {
                stats.self_loops += 1;
            }
            kept.push(t);
        }
        if stats.duplicate_triples > 0 {
            log::warn!("dropped {} duplicate triples", stats.duplicate_triples);
        }

        let mut adjacency: Vec<BTreeMap<EntityId, BTreeSet<RelationId>>> = vec![BTreeMap::new(); n];
        for t in &kept {
            if t.head == t.tail {
                continue;
            }
            adjacency[t.head].entry(t.tail).or_default().insert(t.relation);
            adjacency[t.tail].entry(t.head).or_default().insert(t.relation);
        }
        let neighborhoods = adjacency
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(entity, rels)| Neighbor {
                        entity,
                        relations: rels.into_iter().collect(),
                    })
                    .collect()
            })
            .collect();

        Ok(KnowledgeGraph {
            entities,
            relations,
            triples: kept,
            neighborhoods,
            stats,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Full, untruncated neighborhood sorted by entity id.
    pub fn neighbors(&self, e: EntityId) -> Result<&[Neighbor]> {
        self.neighborhoods
            .get(e)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Id(format!("entity {e} not in 0..{}", self.num_entities())))
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.neighborhoods.get(e).map_or(0, Vec::len)
    }

    /// Neighborhood truncated to at most `cap` entries.
    pub fn neighborhood(&self, e: EntityId, cap: usize, order: NeighborOrder) -> Result<Vec<Neighbor>> {
        let all = self.neighbors(e)?;
        let mut out: Vec<Neighbor> = match order {
            NeighborOrder::AscendingId => all.iter().take(cap).cloned().collect(),
            NeighborOrder::HighestDegreeFirst => {
                let mut v: Vec<&Neighbor> = all.iter().collect();
                v.sort_by(|a, b| {
                    self.degree(b.entity)
                        .cmp(&self.degree(a.entity))
                        .then(a.entity.cmp(&b.entity))
                });
                v.into_iter().take(cap).cloned().collect()
            }
        };
        out.sort_by_key(|n| n.entity);
        Ok(out)
    }

    /// Capped neighborhoods of every entity.
    pub fn capped_neighborhoods(&self, cap: usize, order: NeighborOrder) -> Vec<Vec<Neighbor>> {
        (0..self.num_entities())
            .map(|e| self.neighborhood(e, cap, order).expect("id in range"))
            .collect()
    }
}

/// Strips a URI prefix and replaces underscores when the name is a URI.
pub fn preprocess_name(raw: &str) -> String {
    let raw = raw.trim();
    let is_uri = raw
        .split_once("://")
        .is_some_and(|(scheme, _)| !scheme.is_empty() && scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+.-".contains(c)));
    if !is_uri {
        return raw.to_string();
    }
    let tail = raw.trim_end_matches('/');
    let tail = tail.rsplit(['/', '#']).next().unwrap_or(tail);
    tail.replace('_', " ").trim().to_string()
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid {what} `{field}`"),
    })
}

fn load_side_info(path: &Path, with_description: bool) -> Result<Vec<SideInfo>> {
    let mut rows: BTreeMap<usize, SideInfo> = BTreeMap::new();
    for (line, text) in read_lines(path)? {
        let cols: Vec<&str> = text.split('\t').collect();
        let max_cols = if with_description { 3 } else { 2 };
        if cols.len() < 2 || cols.len() > max_cols {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 2..={max_cols} tab-separated columns, found {}", cols.len()),
            });
        }
        let id = parse_id(path, line, cols[0], "id")?;
        let name = preprocess_name(cols[1]);
        if name.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "empty name".into(),
            });
        }
        let description = cols
            .get(2)
            .map(|d| d.trim().to_string())
            .filter(|d| !d.is_empty());
        if rows.insert(id, SideInfo { name, description }).is_some() {
            return Err(Error::Integrity(format!("{}: duplicate id {id}", path.display())));
        }
    }
    for (expected, id) in rows.keys().enumerate() {
        if *id != expected {
            return Err(Error::Integrity(format!(
                "{}: ids must be dense 0..{}, missing {expected}",
                path.display(),
                rows.len()
            )));
        }
    }
    Ok(rows.into_values().collect())
}

fn load_triples(path: &Path) -> Result<Vec<Triple>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let cols: Vec<&str> = text.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            Ok(Triple {
                head: parse_id(path, line, cols[0], "head id")?,
                relation: parse_id(path, line, cols[1], "relation id")?,
                tail: parse_id(path, line, cols[2], "tail id")?,
            })
        })
        .collect()
}

/// Loads a knowledge graph from its three TSV files.
pub fn load_kg(entities_path: &Path, relations_path: &Path, triples_path: &Path) -> Result<KnowledgeGraph> {
    let entities = load_side_info(entities_path, true)?;
    let relations = load_side_info(relations_path, false)?;
    let triples = load_triples(triples_path)?;
    KnowledgeGraph::new(entities, relations, triples).map_err(|e| match e {
        Error::Integrity(msg) => Error::Integrity(format!("{}: {msg}", triples_path.display())),
        other => other,
    })
}

/// Gold entity pairs `(id in G1, id in G2)`. Only used for validation and
/// evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pub pairs: Vec<(EntityId, EntityId)>,
}

impl AlignmentSet {
    pub fn new(pairs: Vec<(EntityId, EntityId)>) -> Self {
        AlignmentSet { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> AlignmentSet {
        AlignmentSet::new(self.pairs.iter().map(|&(a, b)| (b, a)).collect())
    }

    pub fn validate(&self, n1: usize, n2: usize) -> Result<()> {
        for &(a, b) in &self.pairs {
            if a >= n1 || b >= n2 {
                return Err(Error::Id(format!("alignment ({a}, {b}) outside {n1} x {n2}")));
            }
        }
        Ok(())
    }
}

pub fn load_alignments(path: &Path) -> Result<AlignmentSet> {
    let pairs = read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let cols: Vec<&str> = text.split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected 2 tab-separated columns, found {}", cols.len()),
                });
            }
            Ok((
                parse_id(path, line, cols[0], "G1 id")?,
                parse_id(path, line, cols[1], "G2 id")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentSet::new(pairs))
}

/// Splits off `floor(fraction * n)` pairs as a validation set. Returns
/// `(rest, validation)`; both keep the input order.
pub fn split_validation(alignments: &AlignmentSet, fraction: f64, seed: u64) -> (AlignmentSet, AlignmentSet) {
    let n = alignments.len();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut chosen = vec![false; n];
    for &i in &idx[..k] {
        chosen[i] = true;
    }
    let (mut rest, mut valid) = (Vec::with_capacity(n - k), Vec::with_capacity(k));
    for (i, p) in alignments.pairs.iter().enumerate() {
        if chosen[i] {
            valid.push(*p);
        } else {
            rest.push(*p);
        }
    }
    (AlignmentSet::new(rest), AlignmentSet::new(valid))
}
