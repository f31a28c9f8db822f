//! Contrastive losses, the momentum update and per-graph negative queues.
//!
//! Every loss here is built on one primitive: for an online row `v` and a
//! candidate matrix whose first row is the positive,
//! `loss = logsumexp(C v / τ) − (C v / τ)[0]`. Candidates are momentum
//! embeddings and enter the tape as constants, so gradients reach `v` only.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Side};
use crate::tensor::{ParamSet, Real, Tape, Var};

/// Rejects queue geometries the data cannot fill: `(L+1)·B ≤ min(|E1|,|E2|)`.
pub fn check_queue_constraint(queue_len: usize, batch: usize, n1: usize, n2: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Constraint("batch size must be positive".into()));
    }
    let need = (queue_len + 1)
        .checked_mul(batch)
        .ok_or_else(|| Error::Constraint("queue size overflows".into()))?;
    let have = n1.min(n2);
    if need > have {
        return Err(Error::Constraint(format!(
            "(L+1)*B = ({queue_len}+1)*{batch} = {need} exceeds min(|E1|,|E2|) = {have}"
        )));
    }
    Ok(())
}

/// A batch of entity ids plus the momentum embeddings computed when it was
/// pushed, row-major `ids.len() x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedBatch<T> {
    pub ids: Vec<EntityId>,
    pub embeddings: Vec<T>,
}

impl<T: Real> QueuedBatch<T> {
    pub fn row(&self, i: usize, dim: usize) -> &[T] {
        &self.embeddings[i * dim..(i + 1) * dim]
    }
}

/// FIFO of at most `L+1` batches for one graph. Reaching `L+1` releases the
/// head as the next positive batch; the rest stay as negatives.
#[derive(Debug, Clone)]
pub struct NegativeQueue<T> {
    side: Side,
    queue_len: usize,
    batch: usize,
    dim: usize,
    fifo: VecDeque<QueuedBatch<T>>,
}

impl<T: Real> NegativeQueue<T> {
    pub fn new(side: Side, queue_len: usize, batch: usize, dim: usize) -> Self {
        NegativeQueue {
            side,
            queue_len,
            batch,
            dim,
            fifo: VecDeque::with_capacity(queue_len + 1),
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn capacity(&self) -> usize {
        self.queue_len + 1
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends `batch`; when the queue reaches `L+1` batches its head is
    /// removed and returned.
    pub fn push(&mut self, batch: QueuedBatch<T>) -> Result<Option<QueuedBatch<T>>> {
        if batch.ids.len() != self.batch {
            return Err(Error::Contract(format!(
                "{} queue takes batches of {}, got {}",
                self.side,
                self.batch,
                batch.ids.len()
            )));
        }
        if batch.embeddings.len() != self.batch * self.dim {
            return Err(Error::Shape(format!(
                "{} queue caches {}-dim embeddings, got {} values for {} ids",
                self.side,
                self.dim,
                batch.embeddings.len(),
                batch.ids.len()
            )));
        }
        self.fifo.push_back(batch);
        if self.fifo.len() == self.queue_len + 1 {
            Ok(self.fifo.pop_front())
        } else {
            Ok(None)
        }
    }

    pub fn batches(&self) -> impl Iterator<Item = &QueuedBatch<T>> {
        self.fifo.iter()
    }

    /// Number of cached entity rows.
    pub fn rows(&self) -> usize {
        self.fifo.len() * self.batch
    }

    /// All cached rows, optionally skipping those of entity `skip`.
    pub fn rows_except(&self, skip: Option<EntityId>) -> impl Iterator<Item = &[T]> {
        let dim = self.dim;
        self.fifo.iter().flat_map(move |b| {
            b.ids
                .iter()
                .enumerate()
                .filter(move |(_, &id)| Some(id) != skip)
                .map(move |(i, _)| b.row(i, dim))
        })
    }
}

/// Loss for one online row: `candidates[0]` is the positive, the rest are
/// negatives. Returns `logsumexp(C v/τ) − (C v/τ)[0]`.
pub fn info_nce_row<T: Real>(tape: &mut Tape<T>, v: Var, candidates: &[&[T]], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let d = tape.shape(v).iter().product::<usize>();
    if candidates.is_empty() {
        return Err(Error::Contract("info_nce_row needs a positive candidate".into()));
    }
    let mut flat = Vec::with_capacity(candidates.len() * d);
    for c in candidates {
        if c.len() != d {
            return Err(Error::Shape(format!("candidate of dim {} against a {d}-dim row", c.len())));
        }
        flat.extend_from_slice(c);
    }
    let c = tape.constant(vec![candidates.len(), d], flat)?;
    let logits = tape.matvec(c, v)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let lse = tape.log_sum_exp(logits)?;
    let pos = tape.index(logits, 0)?;
    tape.sub(lse, pos)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

fn mean_of<T: Real>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tape.constant_scalar(T::zero()));
    }
    let all = tape.concat(rows)?;
    tape.mean(all)
}

/// Batch-mean NCE. Row `x` of `online` is contrasted against
/// `positives[x]` with `negatives[x]` as the negative set.
pub fn nce_loss<T: Real>(
    tape: &mut Tape<T>,
    online: &[Var],
    positives: &[&[T]],
    negatives: &[Vec<&[T]>],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    if online.len() != positives.len() || online.len() != negatives.len() {
        return Err(Error::Shape(format!(
            "nce_loss: {} online rows, {} positives, {} negative sets",
            online.len(),
            positives.len(),
            negatives.len()
        )));
    }
    if online.is_empty() {
        return Err(Error::Contract("nce_loss of an empty batch".into()));
    }
    let mut rows = Vec::with_capacity(online.len());
    for ((&v, &p), neg) in online.iter().zip(positives).zip(negatives) {
        if neg.is_empty() {
            return Err(Error::Contract("nce_loss needs at least one negative".into()));
        }
        let mut cands = Vec::with_capacity(neg.len() + 1);
        cands.push(p);
        cands.extend(neg.iter().copied());
        rows.push(info_nce_row(tape, v, &cands, tau)?);
    }
    mean_of(tape, &rows)
}

/// Interactive loss. For each unmasked row (`partners[x]` is `Some`):
/// `β·NCE(same-KG negatives) + (1−β)·NCE(cross-KG negatives)` with the
/// partner's momentum embedding as positive; rows are averaged over the
/// unmasked ones. A side with no negatives for a row contributes zero.
pub fn icl_loss<T: Real>(
    tape: &mut Tape<T>,
    online: &[Var],
    partners: &[Option<&[T]>],
    same_kg: &[Vec<&[T]>],
    cross_kg: &[Vec<&[T]>],
    tau: f64,
    beta: f64,
) -> Result<Var> {
    check_tau(tau)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must be in [0, 1], got {beta}")));
    }
    let n = online.len();
    if partners.len() != n || same_kg.len() != n || cross_kg.len() != n {
        return Err(Error::Shape("icl_loss: rows, partners and negative sets differ in length".into()));
    }
    let mut rows = Vec::new();
    for x in 0..n {
        let Some(p) = partners[x] else { continue };
        let mut terms = Vec::with_capacity(2);
        for (weight, neg) in [(beta, &same_kg[x]), (1.0 - beta, &cross_kg[x])] {
            if neg.is_empty() {
                continue;
            }
            let mut cands = Vec::with_capacity(neg.len() + 1);
            cands.push(p);
            cands.extend(neg.iter().copied());
            let l = info_nce_row(tape, online[x], &cands, tau)?;
            terms.push(tape.scale(l, weight));
        }
        let row = match terms.as_slice() {
            [] => tape.constant_scalar(T::zero()),
            [a] => *a,
            [a, b] => tape.add(*a, *b)?,
            _ => unreachable!(),
        };
        rows.push(row);
    }
    mean_of(tape, &rows)
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, nce: Var, icl: Var) -> Result<Var> {
    tape.add(nce, icl)
}

/// `θ′ ← m·θ′ + (1−m)·θ` for every tensor. `online` is read only.
pub fn momentum_update<T: Real>(online: &ParamSet<T>, momentum: &mut ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must be in [0, 1), got {m}")));
    }
    if !online.same_layout(momentum) {
        return Err(Error::Contract("online and momentum parameters differ in layout".into()));
    }
    for (src, dst) in online.iter().zip(momentum.iter_mut()) {
        for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
            *d = T::of(m * d.f64() + (1.0 - m) * s.f64());
        }
    }
    Ok(())
}
