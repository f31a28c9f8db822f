//! On-disk dataset layout and assembly of encoder inputs.
//!
//! ```text
//! <dir>/kg1/entities.tsv  relations.tsv  triples.tsv
//!           names.icle  relations.icle  [descriptions.icle]
//! <dir>/kg2/...           (same files)
//! <dir>/alignments.tsv    gold pairs, used only for validation/evaluation
//! ```

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::aggregator::GraphInput;
use crate::config::TrainConfig;
use crate::embedding::{fuse, read_embeddings, write_embeddings, EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::kg::{load_alignments, load_kg, AlignmentSet, KnowledgeGraph, Side, SideInfo, Triple};

pub const ENTITIES: &str = "entities.tsv";
pub const RELATIONS: &str = "relations.tsv";
pub const TRIPLES: &str = "triples.tsv";
pub const NAMES: &str = "names.icle";
pub const DESCRIPTIONS: &str = "descriptions.icle";
pub const RELATION_NAMES: &str = "relations.icle";
pub const ALIGNMENTS: &str = "alignments.tsv";

/// One graph with its embeddings.
#[derive(Debug, Clone)]
pub struct GraphData {
    pub kg: KnowledgeGraph,
    pub names: EmbeddingTable,
    pub descriptions: Option<EmbeddingTable>,
    pub relation_names: EmbeddingTable,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graphs: [GraphData; 2],
    pub alignments: AlignmentSet,
}

pub fn side_dir(root: &Path, side: Side) -> PathBuf {
    root.join(match side {
        Side::G1 => "kg1",
        Side::G2 => "kg2",
    })
}

fn expect_kind(t: &EmbeddingTable, kind: EmbeddingKind, path: &Path) -> Result<()> {
    if t.kind() != kind {
        return Err(Error::Format(format!("{}: expected {kind:?} embeddings, found {:?}", path.display(), t.kind())));
    }
    Ok(())
}

impl GraphData {
    pub fn load(dir: &Path) -> Result<Self> {
        let kg = load_kg(&dir.join(ENTITIES), &dir.join(RELATIONS), &dir.join(TRIPLES))?;
        let names_path = dir.join(NAMES);
        let names = read_embeddings(&names_path)?;
        expect_kind(&names, EmbeddingKind::EntityName, &names_path)?;
        let desc_path = dir.join(DESCRIPTIONS);
        let descriptions = if desc_path.exists() {
            let d = read_embeddings(&desc_path)?;
            expect_kind(&d, EmbeddingKind::EntityDescription, &desc_path)?;
            Some(d)
        } else {
            None
        };
        let rel_path = dir.join(RELATION_NAMES);
        let relation_names = read_embeddings(&rel_path)?;
        expect_kind(&relation_names, EmbeddingKind::RelationName, &rel_path)?;
        let g = GraphData {
            kg,
            names,
            descriptions,
            relation_names,
        };
        g.check().map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        Ok(g)
    }

    fn check(&self) -> Result<()> {
        let n = self.kg.num_entities();
        if self.names.count() != n {
            return Err(Error::Data(format!("{n} entities but {} name rows", self.names.count())));
        }
        if let Some(d) = &self.descriptions {
            if d.count() != n {
                return Err(Error::Data(format!("{n} entities but {} description rows", d.count())));
            }
        }
        if self.relation_names.count() != self.kg.num_relations() {
            return Err(Error::Data(format!(
                "{} relations but {} relation rows",
                self.kg.num_relations(),
                self.relation_names.count()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tsv(&dir.join(ENTITIES), self.kg.entities.iter().enumerate().map(|(i, e)| side_line(i, e)))?;
        write_tsv(&dir.join(RELATIONS), self.kg.relations.iter().enumerate().map(|(i, r)| format!("{i}\t{}", r.name)))?;
        write_tsv(
            &dir.join(TRIPLES),
            self.kg.triples.iter().map(|t: &Triple| format!("{}\t{}\t{}", t.head, t.relation, t.tail)),
        )?;
        write_embeddings(&dir.join(NAMES), &self.names)?;
        if let Some(d) = &self.descriptions {
            write_embeddings(&dir.join(DESCRIPTIONS), d)?;
        }
        write_embeddings(&dir.join(RELATION_NAMES), &self.relation_names)
    }
}

fn side_line(i: usize, e: &SideInfo) -> String {
    match &e.description {
        Some(d) => format!("{i}\t{}\t{d}", e.name),
        None => format!("{i}\t{}", e.name),
    }
}

fn write_tsv(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let g1 = GraphData::load(&side_dir(root, Side::G1))?;
        let g2 = GraphData::load(&side_dir(root, Side::G2))?;
        let alignments = load_alignments(&root.join(ALIGNMENTS))?;
        alignments.validate(g1.kg.num_entities(), g2.kg.num_entities())?;
        let ds = Dataset {
            graphs: [g1, g2],
            alignments,
        };
        ds.check_dims()?;
        Ok(ds)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for side in [Side::G1, Side::G2] {
            self.graphs[side.index()].save(&side_dir(root, side))?;
        }
        write_tsv(&root.join(ALIGNMENTS), self.alignments.pairs.iter().map(|(a, b)| format!("{a}\t{b}")))
    }

    fn check_dims(&self) -> Result<()> {
        let [a, b] = &self.graphs;
        if a.names.dim() != b.names.dim() || a.relation_names.dim() != b.relation_names.dim() {
            return Err(Error::Data("name and relation embedding widths differ between the graphs".into()));
        }
        if let (Some(x), Some(y)) = (&a.descriptions, &b.descriptions) {
            if x.dim() != y.dim() {
                return Err(Error::Data("description widths differ between the graphs".into()));
            }
        }
        Ok(())
    }

    pub fn name_dim(&self) -> usize {
        self.graphs[0].names.dim()
    }

    /// Description block width: taken from whichever graph has descriptions,
    /// else equal to the name width.
    pub fn desc_dim(&self) -> usize {
        self.graphs
            .iter()
            .find_map(|g| g.descriptions.as_ref().map(EmbeddingTable::dim))
            .unwrap_or_else(|| self.name_dim())
    }

    pub fn relation_dim(&self) -> usize {
        self.graphs[0].relation_names.dim()
    }

    /// Fused encoder inputs for both graphs with ablations applied.
    pub fn inputs(&self, cfg: &TrainConfig) -> Result<[GraphInput; 2]> {
        let (nd, dd) = (self.name_dim(), self.desc_dim());
        let build = |side: Side| -> Result<GraphInput> {
            let g = &self.graphs[side.index()];
            let mut fused = fuse(&g.names, g.descriptions.as_ref(), dd)?;
            if cfg.no_name {
                fused.zero_columns(0, nd);
            }
            if cfg.no_desc {
                fused.zero_columns(nd, dd);
            }
            Ok(GraphInput {
                side,
                inputs: fused,
                relation_names: g.relation_names.clone(),
                neighbors: g.kg.capped_neighborhoods(cfg.neighbor_cap, cfg.neighbor_order),
            })
        };
        Ok([build(Side::G1)?, build(Side::G2)?])
    }

    /// `(relative path, sha256)` for every input file that exists.
    pub fn digests(root: &Path) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for side in [Side::G1, Side::G2] {
            for f in [ENTITIES, RELATIONS, TRIPLES, NAMES, DESCRIPTIONS, RELATION_NAMES] {
                let p = side_dir(root, side).join(f);
                if p.exists() {
                    out.push((p.strip_prefix(root).unwrap_or(&p).display().to_string(), sha256_file(&p)?));
                }
            }
        }
        let p = root.join(ALIGNMENTS);
        out.push((ALIGNMENTS.to_string(), sha256_file(&p)?));
        Ok(out)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
