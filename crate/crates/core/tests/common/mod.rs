//! Helpers shared by the integration tests: small graphs, central-difference
//! gradient checks and a brute-force nearest-neighbour oracle.
#![allow(dead_code)]

use kgalign::aggregator::{AggregatorConfig, AggregatorParams, GraphInput};
use kgalign::embedding::{EmbeddingKind, EmbeddingTable};
use kgalign::kg::{KnowledgeGraph, NeighborOrder, Side, SideInfo, Triple};
use kgalign::tensor::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INPUT_DIM: usize = 6;
pub const REL_DIM: usize = 4;
pub const ENTITIES: usize = 5;
pub const RELATIONS: usize = 3;

fn random_table(kind: EmbeddingKind, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let mut data: Vec<f32> = (0..count * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    for row in data.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    EmbeddingTable::new(kind, count, dim, data).unwrap()
}

/// Five entities: a hub with a multi-relation edge, a chain, and entity 4
/// isolated.
pub fn small_graph(side: Side, seed: u64) -> GraphInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info = |i: usize| SideInfo {
        name: format!("n{i}"),
        description: None,
    };
    let triples = [(0, 0, 1), (1, 2, 0), (0, 1, 2), (2, 2, 3), (0, 0, 3)]
        .iter()
        .map(|&(head, relation, tail)| Triple { head, relation, tail })
        .collect();
    let kg = KnowledgeGraph::new((0..ENTITIES).map(info).collect(), (0..RELATIONS).map(info).collect(), triples).unwrap();
    GraphInput {
        side,
        inputs: random_table(EmbeddingKind::Fused, ENTITIES, INPUT_DIM, &mut rng),
        relation_names: random_table(EmbeddingKind::RelationName, RELATIONS, REL_DIM, &mut rng),
        neighbors: kg.capped_neighborhoods(15, NeighborOrder::AscendingId),
    }
}

pub fn small_config(heads: usize, use_relations: bool, passthrough: usize) -> AggregatorConfig {
    AggregatorConfig {
        input_dim: INPUT_DIM,
        rel_dim: REL_DIM,
        heads,
        head_dim: 4,
        gate_hidden: 3,
        out_dim: 5,
        slope: 0.01,
        use_relations,
        relation_counts: [RELATIONS, RELATIONS],
        passthrough,
    }
}

/// f64 encoder for `graphs`, with every trainable value drawn at random.
pub fn small_params(cfg: AggregatorConfig, graphs: &[GraphInput; 2], seed: u64) -> AggregatorParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AggregatorParams::init(cfg, [&graphs[0].relation_names, &graphs[1].relation_names], &mut rng).unwrap()
}

/// Worst relative disagreement between tape gradients and central
/// differences over every trainable scalar.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Scale below which a gradient counts as zero when forming relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Stencils tried in order, as `(kind, h)`; one is accepted once halving its
/// step changes the estimate by less than `FD_AGREE` (relative), i.e. it
/// does not straddle a leaky-ReLU kink. One-sided stencils cover points that
/// sit closer to a kink than any well-conditioned central step; the last
/// entry is the fallback.
pub const FD_PLAN: [(Stencil, f64); 7] = [
    (Stencil::Central, 1e-4),
    (Stencil::Forward, 1e-3),
    (Stencil::Backward, 1e-3),
    (Stencil::Forward, 1e-4),
    (Stencil::Backward, 1e-4),
    (Stencil::Central, 1e-5),
    (Stencil::Central, 1e-6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    Central,
    Forward,
    Backward,
}

impl Stencil {
    /// Fourth-order derivative estimate from samples `f(x + k·h)`.
    pub fn estimate(self, h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let one_sided = |s: f64, f: &mut dyn FnMut(f64) -> f64| {
            s * (-25.0 * f(0.0) + 48.0 * f(s) - 36.0 * f(2.0 * s) + 16.0 * f(3.0 * s) - 3.0 * f(4.0 * s)) / (12.0 * h)
        };
        match self {
            Stencil::Central => (-f(2.0) + 8.0 * f(1.0) - 8.0 * f(-1.0) + f(-2.0)) / (12.0 * h),
            Stencil::Forward => one_sided(1.0, &mut f),
            Stencil::Backward => one_sided(-1.0, &mut f),
        }
    }
}

pub const FD_AGREE: f64 = 1e-4;

pub fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Compares the tape gradient of `loss` against fourth-order finite
/// differences (see `FD_PLAN`), whose O(h⁴) truncation error lets `h` stay
/// large enough to keep round-off small.
pub fn check_gradients(params: &AggregatorParams<f64>, loss: impl Fn(&mut Tape<f64>, &AggregatorParams<f64>) -> Var) -> GradReport {
    let mut p = params.clone();
    p.params_mut().zero_grad();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &p);
    tape.backward(l, p.params_mut()).unwrap();

    let value = |q: &AggregatorParams<f64>| {
        let mut t = Tape::new();
        let l = loss(&mut t, q);
        t.scalar(l)
    };
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for i in 0..p.params().len() {
        let t = p.params().get(i);
        let zeros = vec![0.0; t.numel()];
        let analytic = t.grad().unwrap_or(&zeros).to_vec();
        let name = t.name.clone();
        for (j, &a) in analytic.iter().enumerate() {
            let mut q = params.clone();
            let base = q.params().get(i).values()[j];
            let mut sample = |kind: Stencil, h: f64| {
                kind.estimate(h, |k| {
                    q.params_mut().get_mut(i).values_mut()[j] = base + k * h;
                    value(&q)
                })
            };
            let mut numeric = f64::NAN;
            for (kind, h) in FD_PLAN {
                numeric = sample(kind, h);
                if relative(numeric, sample(kind, h / 2.0)) < FD_AGREE {
                    break;
                }
            }
            let r = relative(a, numeric);
            report.checked += 1;
            if r > report.max_rel {
                report.max_rel = r;
                report.worst = format!("{name}[{j}]: tape {a:.9e} vs fd {numeric:.9e}");
            }
        }
    }
    report
}

/// `Σ_k c_k x_k` with fixed pseudo-random weights, turning a vector into a
/// scalar with a generic gradient.
pub fn project(tape: &mut Tape<f64>, x: Var, salt: u64) -> Var {
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed ^ salt);
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = tape.constant(vec![n], c).unwrap();
    tape.dot(x, c).unwrap()
}

pub fn sum_vars(tape: &mut Tape<f64>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x).unwrap();
    }
    acc
}

pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Brute-force nearest target for every source row: `(target, distance)`,
/// ties to the lowest target id.
pub fn naive_nearest(src: &[f32], dst: &[f32], dim: usize) -> Vec<(usize, f64)> {
    src.chunks(dim)
        .map(|a| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, b) in dst.chunks(dim).enumerate() {
                let d = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Entity,
    Gated,
    Semantic,
    Fusion,
}

pub const BRANCHES: [Branch; 4] = [Branch::Entity, Branch::Gated, Branch::Semantic, Branch::Fusion];

/// Projection of one branch's output, summed over every entity of `graph`.
pub fn branch_objective(tape: &mut Tape<f64>, p: &AggregatorParams<f64>, graph: &GraphInput, branch: Branch) -> Var {
    let ids: Vec<usize> = (0..graph.num_entities()).collect();
    let (_, outs) = kgalign::aggregator::encode_detailed(tape, p, graph, &ids).unwrap();
    let mut terms = Vec::new();
    for (i, o) in outs.iter().enumerate() {
        let x = match branch {
            Branch::Entity => Some(o.entity),
            Branch::Gated => o.gated,
            Branch::Semantic => o.semantic,
            Branch::Fusion => Some(o.fused),
        };
        if let Some(x) = x {
            terms.push(project(tape, x, i as u64));
        }
    }
    sum_vars(tape, &terms)
}

/// Batch NCE of the encoded entities against fixed random candidates.
pub fn nce_objective(tape: &mut Tape<f64>, p: &AggregatorParams<f64>, graph: &GraphInput, tau: f64) -> Var {
    let ids: Vec<usize> = (0..graph.num_entities()).collect();
    let enc = kgalign::aggregator::encode_on_tape(tape, p, graph, &ids).unwrap();
    let dim = p.config().out_dim;
    let pos = random_rows(ids.len(), dim, 11);
    let neg = random_rows(6, dim, 12);
    let positives: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
    let negatives: Vec<Vec<&[f64]>> = (0..ids.len()).map(|x| neg.iter().skip(x % 2).map(Vec::as_slice).collect()).collect();
    kgalign::contrastive::nce_loss(tape, &enc.rows, &positives, &negatives, tau).unwrap()
}

/// ICL with one masked row and one row lacking cross-graph negatives.
pub fn icl_objective(tape: &mut Tape<f64>, p: &AggregatorParams<f64>, graph: &GraphInput, tau: f64, beta: f64) -> Var {
    let ids: Vec<usize> = (0..graph.num_entities()).collect();
    let enc = kgalign::aggregator::encode_on_tape(tape, p, graph, &ids).unwrap();
    let dim = p.config().out_dim;
    let partner = random_rows(ids.len(), dim, 21);
    let same = random_rows(4, dim, 22);
    let cross = random_rows(5, dim, 23);
    let partners: Vec<Option<&[f64]>> = (0..ids.len()).map(|x| (x != 1).then(|| partner[x].as_slice())).collect();
    let same_kg: Vec<Vec<&[f64]>> = (0..ids.len()).map(|_| same.iter().map(Vec::as_slice).collect()).collect();
    let cross_kg: Vec<Vec<&[f64]>> = (0..ids.len())
        .map(|x| if x == 3 { Vec::new() } else { cross.iter().map(Vec::as_slice).collect() })
        .collect();
    kgalign::contrastive::icl_loss(tape, &enc.rows, &partners, &same_kg, &cross_kg, tau, beta).unwrap()
}
