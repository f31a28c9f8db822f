//! Relation-aware neighborhood aggregator.
//!
//! Three one-hop branches run side by side and are fused by a single dense
//! layer:
//!
//! * entity attention over `N_i ∪ {i}` on the fused input rows,
//! * relation-gated attention over `N_i`, where each edge's weight comes from
//!   a small gate network applied to a trainable relation embedding,
//! * semantic attention over `N_i`, where neighbor `j` is represented by the
//!   mean name embedding of the relations linking it to `i`.
//!
//! All nonlinearities are leaky ReLU.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg::{EntityId, Neighbor, Side};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

pub const DEFAULT_SLOPE: f64 = 0.01;

/// Architecture dimensions. Online and momentum encoders share one config.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    /// Width of a fused input row (name block followed by description block).
    pub input_dim: usize,
    /// Width of a relation name embedding; also the trainable relation
    /// embedding width. Must not exceed `input_dim`.
    pub rel_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub gate_hidden: usize,
    pub out_dim: usize,
    pub slope: f64,
    pub use_relations: bool,
    /// Relation counts of G1 and G2.
    pub relation_counts: [usize; 2],
    /// Leading input columns appended to the fusion input after the branch
    /// outputs (0 = branches only).
    pub passthrough: usize,
}

impl AggregatorConfig {
    pub fn branch_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn fusion_in(&self) -> usize {
        self.branch_dim() * if self.use_relations { 3 } else { 1 } + self.passthrough
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("aggregator dims must be positive: {self:?}")));
        }
        if self.passthrough > self.input_dim {
            return Err(Error::Config(format!(
                "passthrough width {} exceeds input dim {}",
                self.passthrough, self.input_dim
            )));
        }
        if self.use_relations && (self.rel_dim == 0 || self.rel_dim > self.input_dim || self.gate_hidden == 0) {
            return Err(Error::Config(format!(
                "relation embedding dim {} must be in 1..={} and gate_hidden positive",
                self.rel_dim, self.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RelationLayout {
    st_w: Vec<usize>,
    gate_w1: usize,
    gate_b1: usize,
    gate_w2: Vec<usize>,
    gate_b2: Vec<usize>,
    rel: [usize; 2],
    se_w: Vec<usize>,
    se_q: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    en_w: Vec<usize>,
    en_q: Vec<usize>,
    rel: Option<RelationLayout>,
    fusion_w: usize,
    fusion_b: usize,
}

/// All trainable weights of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<T> {
    config: AggregatorConfig,
    params: ParamSet<T>,
    layout: Layout,
}

fn rel_table_name(side: Side) -> &'static str {
    match side {
        Side::G1 => "agg.st.rel.g1",
        Side::G2 => "agg.st.rel.g2",
    }
}

fn expect(params: &ParamSet<impl Real>, name: &str, shape: &[usize]) -> Result<usize> {
    let i = params
        .index_of(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if params.get(i).shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            params.get(i).shape()
        )));
    }
    Ok(i)
}

impl<T: Real> AggregatorParams<T> {
    /// Random initialization. The trainable relation embeddings start from
    /// the relation name embeddings of each graph.
    pub fn init(config: AggregatorConfig, relation_names: [&EmbeddingTable; 2], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let hd = config.head_dim;
        let mut p = ParamSet::new();
        let mut en_w = Vec::new();
        let mut en_q = Vec::new();
        for k in 0..config.heads {
            en_w.push(p.push(Tensor::uniform(format!("agg.en.W.{k}"), vec![d, hd], d, rng)));
            en_q.push(p.push(Tensor::uniform(format!("agg.en.q.{k}"), vec![2 * hd], 2 * hd, rng)));
        }
        let rel = if config.use_relations {
            let mut st_w = Vec::new();
            for k in 0..config.heads {
                st_w.push(p.push(Tensor::uniform(format!("agg.st.W.{k}"), vec![d, hd], d, rng)));
            }
            let (r, gh) = (config.rel_dim, config.gate_hidden);
            let gate_w1 = p.push(Tensor::uniform("agg.st.gate.W1", vec![r, gh], r, rng));
            let gate_b1 = p.push(Tensor::uniform("agg.st.gate.b1", vec![gh], r, rng));
            let mut gate_w2 = Vec::new();
            let mut gate_b2 = Vec::new();
            for k in 0..config.heads {
                gate_w2.push(p.push(Tensor::uniform(format!("agg.st.gate.W2.{k}"), vec![gh], gh, rng)));
                gate_b2.push(p.push(Tensor::uniform(format!("agg.st.gate.b2.{k}"), vec![1], gh, rng)));
            }
            let mut rel = [0; 2];
            for side in [Side::G1, Side::G2] {
                let table = relation_names[side.index()];
                if table.dim() != r || table.count() != config.relation_counts[side.index()] {
                    return Err(Error::Shape(format!(
                        "{side} relation names are {} x {}, expected {} x {r}",
                        table.count(),
                        table.dim(),
                        config.relation_counts[side.index()]
                    )));
                }
                let values = table.data().iter().map(|&v| T::of(v as f64)).collect();
                rel[side.index()] = p.push(Tensor::new(rel_table_name(side), vec![table.count(), r], values)?);
            }
            let mut se_w = Vec::new();
            let mut se_q = Vec::new();
            for k in 0..config.heads {
                se_w.push(p.push(Tensor::uniform(format!("agg.se.W.{k}"), vec![d, hd], d, rng)));
                se_q.push(p.push(Tensor::uniform(format!("agg.se.q.{k}"), vec![2 * hd], 2 * hd, rng)));
            }
            Some(RelationLayout {
                st_w,
                gate_w1,
                gate_b1,
                gate_w2,
                gate_b2,
                rel,
                se_w,
                se_q,
            })
        } else {
            None
        };
        let fin = config.fusion_in();
        let fusion_w = p.push(Tensor::uniform("agg.fusion.W", vec![fin, config.out_dim], fin, rng));
        let fusion_b = p.push(Tensor::uniform("agg.fusion.b", vec![config.out_dim], fin, rng));
        Ok(AggregatorParams {
            config,
            params: p,
            layout: Layout {
                en_w,
                en_q,
                rel,
                fusion_w,
                fusion_b,
            },
        })
    }

    /// Rebuilds an encoder from a parameter set, inferring every dimension
    /// from tensor shapes.
    pub fn from_params(params: ParamSet<T>, slope: f64) -> Result<Self> {
        let w0 = params
            .by_name("agg.en.W.0")
            .ok_or_else(|| Error::Checkpoint("missing tensor agg.en.W.0".into()))?;
        let (d, hd) = match w0.shape() {
            [d, hd] => (*d, *hd),
            s => return Err(Error::Checkpoint(format!("agg.en.W.0 has rank {}", s.len()))),
        };
        let heads = (0..).take_while(|k| params.index_of(&format!("agg.en.W.{k}")).is_some()).count();
        let mut en_w = Vec::new();
        let mut en_q = Vec::new();
        for k in 0..heads {
            en_w.push(expect(&params, &format!("agg.en.W.{k}"), &[d, hd])?);
            en_q.push(expect(&params, &format!("agg.en.q.{k}"), &[2 * hd])?);
        }
        let use_relations = params.index_of("agg.st.W.0").is_some();
        let (mut rel_dim, mut gate_hidden, mut counts) = (0, 0, [0, 0]);
        let rel = if use_relations {
            let w1 = params
                .by_name("agg.st.gate.W1")
                .ok_or_else(|| Error::Checkpoint("missing tensor agg.st.gate.W1".into()))?;
            if let [r, gh] = w1.shape() {
                rel_dim = *r;
                gate_hidden = *gh;
            } else {
                return Err(Error::Checkpoint("agg.st.gate.W1 must be a matrix".into()));
            }
            let mut rel = [0; 2];
            for side in [Side::G1, Side::G2] {
                let t = params
                    .by_name(rel_table_name(side))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", rel_table_name(side))))?;
                counts[side.index()] = t.shape().first().copied().unwrap_or(0);
                rel[side.index()] = expect(&params, rel_table_name(side), &[counts[side.index()], rel_dim])?;
            }
            let mut layout = RelationLayout {
                st_w: Vec::new(),
                gate_w1: expect(&params, "agg.st.gate.W1", &[rel_dim, gate_hidden])?,
                gate_b1: expect(&params, "agg.st.gate.b1", &[gate_hidden])?,
                gate_w2: Vec::new(),
                gate_b2: Vec::new(),
                rel,
                se_w: Vec::new(),
                se_q: Vec::new(),
            };
            for k in 0..heads {
                layout.st_w.push(expect(&params, &format!("agg.st.W.{k}"), &[d, hd])?);
                layout.gate_w2.push(expect(&params, &format!("agg.st.gate.W2.{k}"), &[gate_hidden])?);
                layout.gate_b2.push(expect(&params, &format!("agg.st.gate.b2.{k}"), &[1])?);
                layout.se_w.push(expect(&params, &format!("agg.se.W.{k}"), &[d, hd])?);
                layout.se_q.push(expect(&params, &format!("agg.se.q.{k}"), &[2 * hd])?);
            }
            Some(layout)
        } else {
            None
        };
        let base = heads * hd * if use_relations { 3 } else { 1 };
        let fw = params
            .by_name("agg.fusion.W")
            .ok_or_else(|| Error::Checkpoint("missing tensor agg.fusion.W".into()))?;
        let (fin, out_dim) = match fw.shape() {
            [f, o] if *f >= base && *f - base <= d => (*f, *o),
            s => return Err(Error::Checkpoint(format!("agg.fusion.W has shape {s:?}, expected [{base}..={}, _]", base + d))),
        };
        let config = AggregatorConfig {
            input_dim: d,
            rel_dim,
            heads,
            head_dim: hd,
            gate_hidden,
            out_dim,
            slope,
            use_relations,
            relation_counts: counts,
            passthrough: fin - base,
        };
        let layout = Layout {
            en_w,
            en_q,
            rel,
            fusion_w: expect(&params, "agg.fusion.W", &[fin, out_dim])?,
            fusion_b: expect(&params, "agg.fusion.b", &[out_dim])?,
        };
        Ok(AggregatorParams { config, params, layout })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Replaces one graph's trainable relation table, e.g. when transferring
    /// to a dataset with a different relation vocabulary.
    pub fn reset_relation_table(&mut self, side: Side, names: &EmbeddingTable) -> Result<()> {
        let Some(rel) = &self.layout.rel else { return Ok(()) };
        if names.dim() != self.config.rel_dim {
            return Err(Error::Checkpoint(format!(
                "relation embeddings have dim {}, encoder expects {}",
                names.dim(),
                self.config.rel_dim
            )));
        }
        let idx = rel.rel[side.index()];
        let values = names.data().iter().map(|&v| T::of(v as f64)).collect();
        *self.params.get_mut(idx) = Tensor::new(rel_table_name(side), vec![names.count(), names.dim()], values)?;
        self.config.relation_counts[side.index()] = names.count();
        Ok(())
    }

    /// Sets the fusion layer to the identity (padded or truncated) and its
    /// bias to zero.
    pub fn set_fusion_identity(&mut self) {
        let (fin, out) = (self.config.fusion_in(), self.config.out_dim);
        let w = self.params.get_mut(self.layout.fusion_w).values_mut();
        for i in 0..fin {
            for j in 0..out {
                w[i * out + j] = if i == j { T::one() } else { T::zero() };
            }
        }
        self.params.get_mut(self.layout.fusion_b).values_mut().fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> AggregatorParams<U> {
        AggregatorParams {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let hd = self.config.head_dim;
        let attn = |tape: &mut Tape<T>, q: usize| -> Result<(Var, Var)> {
            let q = tape.param(&self.params, q);
            Ok((tape.slice(q, 0, hd)?, tape.slice(q, hd, hd)?))
        };
        let mut en_q = Vec::new();
        for &q in &self.layout.en_q {
            en_q.push(attn(tape, q)?);
        }
        let en_w = self.layout.en_w.iter().map(|&w| tape.param(&self.params, w)).collect();
        let rel = match &self.layout.rel {
            Some(l) => {
                let mut se_q = Vec::new();
                for &q in &l.se_q {
                    se_q.push(attn(tape, q)?);
                }
                Some(BoundRelations {
                    st_w: l.st_w.iter().map(|&w| tape.param(&self.params, w)).collect(),
                    gate_w1: tape.param(&self.params, l.gate_w1),
                    gate_b1: tape.param(&self.params, l.gate_b1),
                    gate_w2: l.gate_w2.iter().map(|&w| tape.param(&self.params, w)).collect(),
                    gate_b2: l.gate_b2.iter().map(|&w| tape.param(&self.params, w)).collect(),
                    rel: [tape.param(&self.params, l.rel[0]), tape.param(&self.params, l.rel[1])],
                    se_w: l.se_w.iter().map(|&w| tape.param(&self.params, w)).collect(),
                    se_q,
                })
            }
            None => None,
        };
        Ok(Bound {
            en_w,
            en_q,
            rel,
            fusion_w: tape.param(&self.params, self.layout.fusion_w),
            fusion_b: tape.param(&self.params, self.layout.fusion_b),
        })
    }
}

struct BoundRelations {
    st_w: Vec<Var>,
    gate_w1: Var,
    gate_b1: Var,
    gate_w2: Vec<Var>,
    gate_b2: Vec<Var>,
    rel: [Var; 2],
    se_w: Vec<Var>,
    se_q: Vec<(Var, Var)>,
}

struct Bound {
    en_w: Vec<Var>,
    en_q: Vec<(Var, Var)>,
    rel: Option<BoundRelations>,
    fusion_w: Var,
    fusion_b: Var,
}

/// Encoder input for one graph: fused entity rows, relation name rows and
/// capped neighborhoods.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub side: Side,
    pub inputs: EmbeddingTable,
    pub relation_names: EmbeddingTable,
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl GraphInput {
    pub fn num_entities(&self) -> usize {
        self.inputs.count()
    }

    /// Mean relation-name embedding of every edge around `e`, placed in the
    /// leading columns of an `input_dim` row.
    fn semantic_rows<T: Real>(&self, e: EntityId, input_dim: usize) -> Vec<T> {
        let nb = &self.neighbors[e];
        let r = self.relation_names.dim();
        let mut out = vec![T::zero(); nb.len() * input_dim];
        for (j, n) in nb.iter().enumerate() {
            let inv = 1.0 / n.relations.len() as f64;
            for c in 0..r {
                let s: f64 = n.relations.iter().map(|&rel| self.relation_names.row(rel)[c] as f64).sum();
                out[j * input_dim + c] = T::of(s * inv);
            }
        }
        out
    }
}

/// Attention weights recorded for one entity, one `Var` per head.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub entity: Vec<Var>,
    pub gated: Vec<Var>,
    pub semantic: Vec<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct Encoded {
    pub rows: Vec<Var>,
    pub attention: Vec<AttentionTrace>,
    /// Entities with no neighbors; their gated and semantic outputs are zero.
    pub isolated: usize,
}

/// Per-entity branch outputs, exposed for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub entity: Var,
    pub gated: Option<Var>,
    pub semantic: Option<Var>,
    pub fused: Var,
}

/// Encodes `ids` of `graph` on `tape`. Gradients reach `params` only if the
/// tape records and the tensors require them.
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &AggregatorParams<T>,
    graph: &GraphInput,
    ids: &[EntityId],
) -> Result<Encoded> {
    let (encoded, _) = encode_detailed(tape, params, graph, ids)?;
    Ok(encoded)
}

pub fn encode_detailed<T: Real>(
    tape: &mut Tape<T>,
    params: &AggregatorParams<T>,
    graph: &GraphInput,
    ids: &[EntityId],
) -> Result<(Encoded, Vec<BranchOutputs>)> {
    let cfg = &params.config;
    if graph.inputs.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "{} inputs have dim {}, encoder expects {}",
            graph.side,
            graph.inputs.dim(),
            cfg.input_dim
        )));
    }
    if cfg.use_relations {
        if graph.relation_names.dim() != cfg.rel_dim {
            return Err(Error::Shape(format!(
                "{} relation names have dim {}, encoder expects {}",
                graph.side,
                graph.relation_names.dim(),
                cfg.rel_dim
            )));
        }
        if graph.relation_names.count() != cfg.relation_counts[graph.side.index()] {
            return Err(Error::Shape(format!(
                "{} has {} relations, encoder table has {}",
                graph.side,
                graph.relation_names.count(),
                cfg.relation_counts[graph.side.index()]
            )));
        }
    }
    let n = graph.num_entities();
    if let Some(&bad) = ids.iter().find(|&&e| e >= n) {
        return Err(Error::Id(format!("entity {bad} not in 0..{n} of {}", graph.side)));
    }

    let bound = params.bind(tape)?;
    let d = cfg.input_dim;

    // Local row index for every entity touched by this call.
    let mut local: HashMap<EntityId, usize> = HashMap::new();
    let mut order: Vec<EntityId> = Vec::new();
    for &e in ids {
        for x in std::iter::once(e).chain(graph.neighbors[e].iter().map(|nb| nb.entity)) {
            local.entry(x).or_insert_with(|| {
                order.push(x);
                order.len() - 1
            });
        }
    }
    let mut sub = Vec::with_capacity(order.len() * d);
    for &e in &order {
        sub.extend(graph.inputs.row(e).iter().map(|&v| T::of(v as f64)));
    }
    let h = tape.constant(vec![order.len(), d], sub)?;
    let hw_en: Vec<Var> = bound.en_w.iter().map(|&w| tape.matmul(h, w)).collect::<Result<_>>()?;
    let (hw_st, hw_se) = match &bound.rel {
        Some(r) => (
            r.st_w.iter().map(|&w| tape.matmul(h, w)).collect::<Result<Vec<_>>>()?,
            r.se_w.iter().map(|&w| tape.matmul(h, w)).collect::<Result<Vec<_>>>()?,
        ),
        None => (Vec::new(), Vec::new()),
    };

    let slope = cfg.slope;
    let mut out = Encoded::default();
    let mut branches = Vec::with_capacity(ids.len());
    for &e in ids {
        let nb = &graph.neighbors[e];
        let center = local[&e];
        let nb_rows: Vec<usize> = nb.iter().map(|x| local[&x.entity]).collect();
        let mut trace = AttentionTrace::default();

        // Entity branch: attention over the center and its neighbors.
        let mut set = vec![center];
        set.extend(&nb_rows);
        let mut heads = Vec::with_capacity(cfg.heads);
        for (k, &hw) in hw_en.iter().enumerate() {
            let (ql, qr) = bound.en_q[k];
            let wh = tape.gather_rows(hw, &set)?;
            let c = tape.row(hw, center)?;
            let (alpha, agg) = attend(tape, wh, c, ql, qr, slope)?;
            trace.entity.push(alpha);
            heads.push(agg);
        }
        let h_en = tape.concat(&heads)?;

        let (h_st, h_se) = match &bound.rel {
            Some(r) if nb.is_empty() => {
                out.isolated += 1;
                let z1 = tape.constant(vec![cfg.branch_dim()], vec![T::zero(); cfg.branch_dim()])?;
                let z2 = tape.constant(vec![cfg.branch_dim()], vec![T::zero(); cfg.branch_dim()])?;
                let _ = r;
                (Some(z1), Some(z2))
            }
            Some(r) => {
                // Relation-gated branch.
                let groups: Vec<Vec<usize>> = nb.iter().map(|x| x.relations.clone()).collect();
                let rel_rows = tape.gather_mean(r.rel[graph.side.index()], groups)?;
                let g1 = tape.matmul(rel_rows, r.gate_w1)?;
                let g1 = tape.add_bias(g1, r.gate_b1)?;
                let g1 = tape.leaky_relu(g1, slope);
                let mut st_heads = Vec::with_capacity(cfg.heads);
                for (k, &hw) in hw_st.iter().enumerate() {
                    let gamma = tape.matvec(g1, r.gate_w2[k])?;
                    let gamma = tape.add_scalar(gamma, r.gate_b2[k])?;
                    let gamma = tape.leaky_relu(gamma, slope);
                    let beta = tape.softmax(gamma)?;
                    let wh = tape.gather_rows(hw, &nb_rows)?;
                    let agg = tape.vecmat(beta, wh)?;
                    trace.gated.push(beta);
                    st_heads.push(tape.leaky_relu(agg, slope));
                }
                let h_st = tape.concat(&st_heads)?;

                // Semantic branch.
                let sem = tape.constant(vec![nb.len(), d], graph.semantic_rows(e, d))?;
                let mut se_heads = Vec::with_capacity(cfg.heads);
                for (k, &hw) in hw_se.iter().enumerate() {
                    let (ql, qr) = r.se_q[k];
                    let wh = tape.matmul(sem, r.se_w[k])?;
                    let c = tape.row(hw, center)?;
                    let (alpha, agg) = attend(tape, wh, c, ql, qr, slope)?;
                    trace.semantic.push(alpha);
                    se_heads.push(agg);
                }
                (Some(h_st), Some(tape.concat(&se_heads)?))
            }
            None => (None, None),
        };

        let mut parts = vec![h_en];
        parts.extend(h_st);
        parts.extend(h_se);
        if cfg.passthrough > 0 {
            let raw = tape.row(h, center)?;
            parts.push(tape.slice(raw, 0, cfg.passthrough)?);
        }
        let x = tape.concat(&parts)?;
        let y = tape.vecmat(x, bound.fusion_w)?;
        let y = tape.add(y, bound.fusion_b)?;
        let v = tape.leaky_relu(y, slope);
        out.rows.push(v);
        out.attention.push(trace);
        branches.push(BranchOutputs {
            entity: h_en,
            gated: h_st,
            semantic: h_se,
            fused: v,
        });
    }
    Ok((out, branches))
}

/// `softmax(σ(q_l·c + q_r·wh_j))` over the rows of `wh`, then
/// `σ(Σ α_j wh_j)`.
fn attend<T: Real>(tape: &mut Tape<T>, wh: Var, center: Var, ql: Var, qr: Var, slope: f64) -> Result<(Var, Var)> {
    let sc = tape.dot(center, ql)?;
    let sn = tape.matvec(wh, qr)?;
    let s = tape.add_scalar(sn, sc)?;
    let s = tape.leaky_relu(s, slope);
    let alpha = tape.softmax(s)?;
    let agg = tape.vecmat(alpha, wh)?;
    Ok((alpha, tape.leaky_relu(agg, slope)))
}

const ENCODE_CHUNK: usize = 64;

/// Encodes `ids` without recording gradients, returning a row-major
/// `ids.len() x out_dim` matrix. Chunks run in parallel; the result does not
/// depend on the thread count.
pub fn encode_values<T: Real>(params: &AggregatorParams<T>, graph: &GraphInput, ids: &[EntityId]) -> Result<Vec<T>> {
    let chunks: Vec<Vec<T>> = ids
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::no_grad();
            let enc = encode_on_tape(&mut tape, params, graph, chunk)?;
            let mut rows = Vec::with_capacity(chunk.len() * params.config.out_dim);
            for v in enc.rows {
                rows.extend_from_slice(tape.value(v));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Encodes every entity of `graph`.
pub fn encode_all<T: Real>(params: &AggregatorParams<T>, graph: &GraphInput) -> Result<Vec<T>> {
    let ids: Vec<EntityId> = (0..graph.num_entities()).collect();
    encode_values(params, graph, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{fallback_encode, EmbeddingKind};
    use crate::kg::{KnowledgeGraph, NeighborOrder, SideInfo, Triple};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_graph(side: Side, n: usize, triples: &[(usize, usize, usize)], nrel: usize, dim: usize, rel_dim: usize) -> GraphInput {
        let ents: Vec<SideInfo> = (0..n)
            .map(|i| SideInfo {
                name: format!("e{i}"),
                description: None,
            })
            .collect();
        let rels: Vec<SideInfo> = (0..nrel)
            .map(|i| SideInfo {
                name: format!("r{i}"),
                description: None,
            })
            .collect();
        let kg = KnowledgeGraph::new(
            ents,
            rels,
            triples
                .iter()
                .map(|&(h, r, t)| Triple {
                    head: h,
                    relation: r,
                    tail: t,
                })
                .collect(),
        )
        .unwrap();
        let names: Vec<String> = (0..n).map(|i| format!("entity {i} x{}", i * 7)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        // Random fused rows so neighbors differ in every coordinate.
        let inputs: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let _ = names;
        let rel_names: Vec<String> = (0..nrel).map(|i| format!("relation {i}")).collect();
        GraphInput {
            side,
            inputs: EmbeddingTable::new(EmbeddingKind::Fused, n, dim, inputs).unwrap(),
            relation_names: fallback_encode(&rel_names, rel_dim, 11, EmbeddingKind::RelationName).unwrap(),
            neighbors: kg.capped_neighborhoods(15, NeighborOrder::AscendingId),
        }
    }

    fn config(dim: usize, rel_dim: usize, heads: usize, counts: [usize; 2], use_relations: bool) -> AggregatorConfig {
        AggregatorConfig {
            input_dim: dim,
            rel_dim,
            heads,
            head_dim: dim,
            gate_hidden: 3,
            out_dim: 5,
            slope: DEFAULT_SLOPE,
            use_relations,
            relation_counts: counts,
            passthrough: 0,
        }
    }

    fn params_for(g1: &GraphInput, g2: &GraphInput, heads: usize, use_relations: bool, seed: u64) -> AggregatorParams<f64> {
        let cfg = config(g1.inputs.dim(), g1.relation_names.dim(), heads, [g1.relation_names.count(), g2.relation_names.count()], use_relations);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AggregatorParams::init(cfg, [&g1.relation_names, &g2.relation_names], &mut rng).unwrap()
    }

    fn lrelu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            DEFAULT_SLOPE * x
        }
    }

    fn mat(p: &ParamSet<f64>, name: &str) -> (Vec<f64>, usize, usize) {
        let t = p.by_name(name).unwrap();
        let s = t.shape();
        let (r, c) = if s.len() == 2 { (s[0], s[1]) } else { (1, s[0]) };
        (t.values().to_vec(), r, c)
    }

    /// x [r] times W [r x c].
    fn xw(x: &[f64], w: &(Vec<f64>, usize, usize)) -> Vec<f64> {
        (0..w.2).map(|j| (0..w.1).map(|i| x[i] * w.0[i * w.2 + j]).sum()).collect()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn input_row(g: &GraphInput, e: usize) -> Vec<f64> {
        g.inputs.row(e).iter().map(|&v| v as f64).collect()
    }

    /// Direct transcription of the attention formula for one head.
    fn oracle_gat(center: &[f64], members: &[Vec<f64>], w: &(Vec<f64>, usize, usize), q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = w.2;
        let wc = xw(center, w);
        let wm: Vec<Vec<f64>> = members.iter().map(|m| xw(m, w)).collect();
        let scores: Vec<f64> = wm
            .iter()
            .map(|wj| {
                let s: f64 = (0..hd).map(|t| q[t] * wc[t]).sum::<f64>() + (0..hd).map(|t| q[hd + t] * wj[t]).sum::<f64>();
                lrelu(s)
            })
            .collect();
        let alpha = softmax(&scores);
        let out = (0..hd)
            .map(|t| lrelu(alpha.iter().zip(&wm).map(|(a, wj)| a * wj[t]).sum()))
            .collect();
        (alpha, out)
    }

    fn pair() -> (GraphInput, GraphInput) {
        let t = [(0, 0, 1), (0, 1, 2), (2, 2, 0), (3, 1, 0), (1, 0, 3)];
        (toy_graph(Side::G1, 5, &t, 3, 4, 3), toy_graph(Side::G2, 5, &t[..3], 3, 4, 3))
    }

    #[test]
    fn entity_branch_matches_direct_evaluation() {
        let (g1, g2) = pair();
        let p = params_for(&g1, &g2, 1, true, 5);
        let mut tape = Tape::no_grad();
        let ids: Vec<usize> = (0..5).collect();
        let (_, branches) = encode_detailed(&mut tape, &p, &g1, &ids).unwrap();
        let w = mat(p.params(), "agg.en.W.0");
        let q = p.params().by_name("agg.en.q.0").unwrap().values().to_vec();
        for e in 0..5 {
            let mut members = vec![input_row(&g1, e)];
            members.extend(g1.neighbors[e].iter().map(|n| input_row(&g1, n.entity)));
            let (_, oracle) = oracle_gat(&input_row(&g1, e), &members, &w, &q);
            let got = tape.value(branches[e].entity);
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5, "entity {e}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gated_branch_matches_direct_evaluation() {
        let (g1, g2) = pair();
        let p = params_for(&g1, &g2, 1, true, 6);
        let mut tape = Tape::no_grad();
        let (_, branches) = encode_detailed(&mut tape, &p, &g1, &[0, 1, 2, 3]).unwrap();
        let w = mat(p.params(), "agg.st.W.0");
        let w1 = mat(p.params(), "agg.st.gate.W1");
        let b1 = p.params().by_name("agg.st.gate.b1").unwrap().values().to_vec();
        let w2 = p.params().by_name("agg.st.gate.W2.0").unwrap().values().to_vec();
        let b2 = p.params().by_name("agg.st.gate.b2.0").unwrap().values()[0];
        let rel = mat(p.params(), "agg.st.rel.g1");
        for e in 0..4 {
            let nb = &g1.neighbors[e];
            let gammas: Vec<f64> = nb
                .iter()
                .map(|n| {
                    let r: Vec<f64> = (0..rel.2)
                        .map(|c| n.relations.iter().map(|&x| rel.0[x * rel.2 + c]).sum::<f64>() / n.relations.len() as f64)
                        .collect();
                    let hidden: Vec<f64> = xw(&r, &w1).iter().zip(&b1).map(|(a, b)| lrelu(a + b)).collect();
                    lrelu(hidden.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>() + b2)
                })
                .collect();
            let beta = softmax(&gammas);
            let wh: Vec<Vec<f64>> = nb.iter().map(|n| xw(&input_row(&g1, n.entity), &w)).collect();
            let oracle: Vec<f64> = (0..w.2).map(|t| lrelu(beta.iter().zip(&wh).map(|(b, x)| b * x[t]).sum())).collect();
            let got = tape.value(branches[e].gated.unwrap());
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5, "entity {e}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn semantic_branch_matches_direct_evaluation() {
        let (g1, g2) = pair();
        let p = params_for(&g1, &g2, 1, true, 7);
        let mut tape = Tape::no_grad();
        let (_, branches) = encode_detailed(&mut tape, &p, &g1, &[0, 1, 2, 3]).unwrap();
        let w = mat(p.params(), "agg.se.W.0");
        let q = p.params().by_name("agg.se.q.0").unwrap().values().to_vec();
        let d = g1.inputs.dim();
        for e in 0..4 {
            let members: Vec<Vec<f64>> = g1.neighbors[e]
                .iter()
                .map(|n| {
                    let mut row = vec![0.0; d];
                    for (c, slot) in row.iter_mut().enumerate().take(g1.relation_names.dim()) {
                        *slot = n.relations.iter().map(|&r| g1.relation_names.row(r)[c] as f64).sum::<f64>() / n.relations.len() as f64;
                    }
                    row
                })
                .collect();
            let (_, oracle) = oracle_gat(&input_row(&g1, e), &members, &w, &q);
            let got = tape.value(branches[e].semantic.unwrap());
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5, "entity {e}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn semantic_neighbor_is_mean_of_relation_names() {
        // Entity 0 and 1 are linked by relations 0 and 2.
        let g = toy_graph(Side::G1, 2, &[(0, 0, 1), (1, 2, 0)], 3, 4, 3);
        let rows: Vec<f64> = g.semantic_rows(0, 4);
        for c in 0..3 {
            let want = (g.relation_names.row(0)[c] as f64 + g.relation_names.row(2)[c] as f64) / 2.0;
            assert!((rows[c] - want).abs() < 1e-7);
        }
        assert_eq!(rows[3], 0.0);
    }

    #[test]
    fn isolated_entity_attends_to_itself() {
        let g1 = toy_graph(Side::G1, 3, &[(0, 0, 1)], 1, 4, 3);
        let g2 = g1.clone();
        let p = params_for(&g1, &g2, 1, true, 3);
        let mut tape = Tape::no_grad();
        let (enc, branches) = encode_detailed(&mut tape, &p, &g1, &[2]).unwrap();
        assert_eq!(tape.value(enc.attention[0].entity[0]), &[1.0]);
        assert_eq!(enc.isolated, 1);
        assert!(tape.value(branches[0].gated.unwrap()).iter().all(|&v| v == 0.0));
        assert!(tape.value(branches[0].semantic.unwrap()).iter().all(|&v| v == 0.0));
        let w = mat(p.params(), "agg.en.W.0");
        let direct: Vec<f64> = xw(&input_row(&g1, 2), &w).into_iter().map(lrelu).collect();
        for (a, b) in tape.value(branches[0].entity).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_and_twin_neighbors() {
        // 0 -- 1 only: gated weight is 1. 2 has neighbors 3 and 4 via relation 0.
        let g = toy_graph(Side::G1, 5, &[(0, 1, 1), (2, 0, 3), (4, 0, 2)], 2, 4, 3);
        let p = params_for(&g, &g, 1, true, 9);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, &p, &g, &[0, 2]).unwrap();
        assert_eq!(tape.value(enc.attention[0].gated[0]), &[1.0]);
        assert_eq!(tape.value(enc.attention[0].semantic[0]), &[1.0]);
        let beta = tape.value(enc.attention[1].gated[0]);
        assert!((beta[0] - 0.5).abs() < 1e-12 && (beta[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_split_attention() {
        // Center and its only neighbor have identical input rows.
        let mut g = toy_graph(Side::G1, 2, &[(0, 0, 1)], 1, 4, 3);
        let mut data = g.inputs.data().to_vec();
        let first: Vec<f32> = data[..4].to_vec();
        data[4..8].copy_from_slice(&first);
        g.inputs = EmbeddingTable::new(EmbeddingKind::Fused, 2, 4, data).unwrap();
        let p = params_for(&g, &g, 1, false, 1);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, &p, &g, &[0]).unwrap();
        let a = tape.value(enc.attention[0].entity[0]);
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_sums_to_one() {
        let (g1, g2) = pair();
        let p = params_for(&g1, &g2, 2, true, 21);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, &p, &g1, &[0, 1, 2, 3, 4]).unwrap();
        for tr in &enc.attention {
            for &v in tr.entity.iter().chain(&tr.gated).chain(&tr.semantic) {
                let s: f64 = tape.value(v).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fusion_dims_and_identity() {
        let (g1, g2) = pair();
        let mut p = params_for(&g1, &g2, 1, true, 2);
        assert_eq!(p.config().fusion_in(), 12);
        let cfg = AggregatorConfig {
            input_dim: 1536,
            rel_dim: 768,
            heads: 1,
            head_dim: 1536,
            gate_hidden: 4,
            out_dim: 768 * 5,
            slope: DEFAULT_SLOPE,
            use_relations: false,
            relation_counts: [0, 0],
            passthrough: 0,
        };
        assert_eq!(cfg.out_dim, 3840);
        assert_eq!(cfg.fusion_in(), 1536);
        // Branch outputs plus the raw name block give the 7x width.
        let wide = AggregatorConfig {
            use_relations: true,
            passthrough: 768,
            ..cfg
        };
        assert_eq!(wide.fusion_in(), 7 * 768);

        // With an identity fusion layer the output is the non-negative
        // concatenation, truncated to out_dim.
        p.set_fusion_identity();
        let mut tape = Tape::no_grad();
        let (enc, br) = encode_detailed(&mut tape, &p, &g1, &[0]).unwrap();
        let mut cat = tape.value(br[0].entity).to_vec();
        cat.extend(tape.value(br[0].gated.unwrap()));
        cat.extend(tape.value(br[0].semantic.unwrap()));
        let expect: Vec<f64> = cat.iter().take(5).map(|&x| lrelu(x)).collect();
        assert_eq!(tape.value(enc.rows[0]), expect.as_slice());
    }

    #[test]
    fn zero_inputs_give_activation_of_zero() {
        let mut g = toy_graph(Side::G1, 1, &[], 1, 4, 3);
        g.inputs = EmbeddingTable::zeros(EmbeddingKind::Fused, 1, 4);
        let mut p = params_for(&g, &g, 1, true, 4);
        let b = p.layout.fusion_b;
        p.params_mut().get_mut(b).values_mut().fill(0.0);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, &p, &g, &[0]).unwrap();
        assert!(tape.value(enc.rows[0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batching_and_roles() {
        let (g1, g2) = pair();
        let online = params_for(&g1, &g2, 1, true, 12);
        let momentum = online.clone();
        let all = encode_values(&online, &g1, &[0, 1, 2, 3, 4]).unwrap();
        let single = encode_values(&online, &g1, &[3]).unwrap();
        let od = online.config().out_dim;
        assert_eq!(&all[3 * od..4 * od], single.as_slice());
        assert_eq!(encode_values(&momentum, &g1, &[0, 1, 2, 3, 4]).unwrap(), all);
        let perm = encode_values(&online, &g1, &[4, 2, 0, 3, 1]).unwrap();
        for (i, &e) in [4usize, 2, 0, 3, 1].iter().enumerate() {
            assert_eq!(&perm[i * od..(i + 1) * od], &all[e * od..(e + 1) * od]);
        }
    }

    #[test]
    fn no_grad_encoding_leaves_gradients_empty() {
        let (g1, g2) = pair();
        let mut p = params_for(&g1, &g2, 1, true, 12);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, &p, &g1, &[0, 1]).unwrap();
        let s = tape.sum(enc.rows[0]);
        assert!(tape.backward(s, p.params_mut()).is_err());
        assert!(p.params().iter().all(|t| t.grad().is_none()));
    }

    #[test]
    fn checkpoint_layout_roundtrip() {
        let (g1, g2) = pair();
        let p = params_for(&g1, &g2, 2, true, 13);
        let back = AggregatorParams::from_params(p.params().clone(), DEFAULT_SLOPE).unwrap();
        assert_eq!(back.config(), p.config());
        let q = params_for(&g1, &g2, 1, false, 13);
        let back = AggregatorParams::from_params(q.params().clone(), DEFAULT_SLOPE).unwrap();
        assert_eq!(back.config().fusion_in(), 4);
        assert!(!back.config().use_relations);
        let mut cfg = p.config().clone();
        cfg.passthrough = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = AggregatorParams::<f64>::init(cfg.clone(), [&g1.relation_names, &g2.relation_names], &mut rng).unwrap();
        let back = AggregatorParams::from_params(w.params().clone(), DEFAULT_SLOPE).unwrap();
        assert_eq!(back.config(), &cfg);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, &w, &g1, &[0]).unwrap();
        assert_eq!(tape.shape(enc.rows[0]), &[5]);
    }
}
