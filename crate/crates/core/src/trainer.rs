//! The training loop: per-epoch mining, queue warm-up, contrastive steps,
//! momentum updates and validation-based early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{encode_all, encode_on_tape, encode_values, AggregatorConfig, AggregatorParams, GraphInput};
use crate::config::TrainConfig;
use crate::contrastive::{check_queue_constraint, icl_loss, momentum_update, nce_loss, total_loss, NegativeQueue, QueuedBatch};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::kg::{AlignmentSet, EntityId, Side};
use crate::miner::{mine, PseudoLookup, PseudoPairSet};
use crate::tensor::{AdamState, Checkpoint, Tape};

pub const ONLINE_PREFIX: &str = "online.";
pub const MOMENTUM_PREFIX: &str = "momentum.";

/// Derives encoder dimensions from the config and the prepared inputs.
pub fn aggregator_config(cfg: &TrainConfig, graphs: &[GraphInput; 2], name_dim: usize) -> Result<AggregatorConfig> {
    let input_dim = graphs[0].inputs.dim();
    if graphs[1].inputs.dim() != input_dim {
        return Err(Error::Shape("the two graphs have different input widths".into()));
    }
    let ac = AggregatorConfig {
        input_dim,
        rel_dim: graphs[0].relation_names.dim(),
        heads: cfg.heads,
        head_dim: if cfg.head_dim == 0 { input_dim } else { cfg.head_dim },
        gate_hidden: cfg.gate_hidden,
        out_dim: if cfg.out_dim == 0 { 5 * name_dim } else { cfg.out_dim },
        slope: cfg.slope,
        use_relations: !cfg.no_rel,
        relation_counts: [graphs[0].relation_names.count(), graphs[1].relation_names.count()],
        passthrough: cfg.fusion_passthrough,
    };
    ac.validate()?;
    Ok(ac)
}

fn row(v: &[f32], i: usize, dim: usize) -> &[f32] {
    &v[i * dim..(i + 1) * dim]
}

/// One parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub side: Side,
    pub nce: f64,
    pub icl: f64,
    pub total: f64,
    pub lr: f64,
    /// Fraction of the positive batch with a pseudo-partner.
    pub pseudo_coverage: f64,
    /// Same-graph negatives seen by every row of the positive batch.
    pub negatives: usize,
    /// Pushes into this graph's queue so far, including the current one.
    pub pushes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub nce_sum: f64,
    pub icl_sum: f64,
    pub total_sum: f64,
    pub coverage: [f64; 2],
    pub valid_hits1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_hits1: f64,
    pub stopped_early: bool,
}

pub struct Trainer {
    cfg: TrainConfig,
    graphs: [GraphInput; 2],
    validation: AlignmentSet,
    online: AggregatorParams<f32>,
    momentum: AggregatorParams<f32>,
    adam: AdamState<f32>,
    queues: [NegativeQueue<f32>; 2],
    lookup: PseudoLookup,
    mined: Option<[PseudoPairSet; 2]>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    pushes: [usize; 2],
    encoded: Option<[Vec<f32>; 2]>,
    best: Option<(usize, f64, Checkpoint)>,
    since_best: usize,
    history: Vec<EpochMetrics>,
    steps: Vec<StepRecord>,
}

impl Trainer {
    /// Validates the configuration against the data and initializes θ
    /// randomly with θ′ = θ. `validation` must not contain evaluation pairs.
    pub fn new(cfg: TrainConfig, graphs: [GraphInput; 2], validation: AlignmentSet, name_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let (n1, n2) = (graphs[0].num_entities(), graphs[1].num_entities());
        check_queue_constraint(cfg.queue_len, cfg.batch_size, n1, n2)?;
        validation.validate(n1, n2)?;
        let ac = aggregator_config(&cfg, &graphs, name_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let online = AggregatorParams::<f32>::init(ac, [&graphs[0].relation_names, &graphs[1].relation_names], &mut rng)?;
        Self::with_params(cfg, graphs, validation, online, rng)
    }

    fn with_params(
        cfg: TrainConfig,
        graphs: [GraphInput; 2],
        validation: AlignmentSet,
        online: AggregatorParams<f32>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let mut momentum = online.clone();
        momentum.params_mut().set_requires_grad(false);
        let out = online.config().out_dim;
        let adam = AdamState::new(online.params(), cfg.learning_rate);
        let (n1, n2) = (graphs[0].num_entities(), graphs[1].num_entities());
        Ok(Trainer {
            queues: [
                NegativeQueue::new(Side::G1, cfg.queue_len, cfg.batch_size, out),
                NegativeQueue::new(Side::G2, cfg.queue_len, cfg.batch_size, out),
            ],
            lookup: PseudoLookup::empty(n1, n2),
            mined: None,
            rng,
            epoch: 0,
            step: 0,
            pushes: [0, 0],
            encoded: None,
            best: None,
            since_best: 0,
            history: Vec::new(),
            steps: Vec::new(),
            cfg,
            graphs,
            validation,
            online,
            momentum,
            adam,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn graphs(&self) -> &[GraphInput; 2] {
        &self.graphs
    }

    pub fn online(&self) -> &AggregatorParams<f32> {
        &self.online
    }

    pub fn momentum(&self) -> &AggregatorParams<f32> {
        &self.momentum
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn updates(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn queue(&self, side: Side) -> &NegativeQueue<f32> {
        &self.queues[side.index()]
    }

    pub fn lookup(&self) -> &PseudoLookup {
        &self.lookup
    }

    /// Pair sets mined at the start of the latest epoch.
    pub fn mined(&self) -> Option<&[PseudoPairSet; 2]> {
        self.mined.as_ref()
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn out_dim(&self) -> usize {
        self.online.config().out_dim
    }

    /// Online-encoder embeddings of every entity of both graphs under the
    /// current parameters.
    pub fn encoded(&mut self) -> Result<&[Vec<f32>; 2]> {
        if self.encoded.is_none() {
            let a = encode_all(&self.online, &self.graphs[0])?;
            let b = encode_all(&self.online, &self.graphs[1])?;
            self.encoded = Some([a, b]);
        }
        Ok(self.encoded.as_ref().expect("just filled"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(ONLINE_PREFIX, self.online.params());
        ck.extend(MOMENTUM_PREFIX, self.momentum.params());
        ck
    }

    /// Checkpoint of the epoch with the best validation Hits@1, if any.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref().map(|b| &b.2)
    }

    /// Mines pseudo pairs from the current online encoder.
    pub fn mine_pairs(&mut self) -> Result<()> {
        let (lambda, epoch, dim) = (self.cfg.lambda, self.epoch, self.out_dim());
        let [v1, v2] = self.encoded()?;
        let s1 = mine(Side::G1, v1, v2, dim, lambda, epoch)?;
        let s2 = mine(Side::G2, v2, v1, dim, lambda, epoch)?;
        self.lookup = PseudoLookup::merge(&s1, &s2)?;
        self.mined = Some([s1, s2]);
        Ok(())
    }

    /// Pushes one batch of `side`; when its queue releases a positive batch,
    /// runs one optimization step and returns its record.
    pub fn process_batch(&mut self, side: Side, ids: Vec<EntityId>) -> Result<Option<StepRecord>> {
        let g = side.index();
        let cached = encode_values(&self.momentum, &self.graphs[g], &ids)?;
        self.pushes[g] += 1;
        let Some(positive) = self.queues[g].push(QueuedBatch { ids, embeddings: cached })? else {
            return Ok(None);
        };
        self.optimize(side, &positive.ids).map(Some)
    }

    fn optimize(&mut self, side: Side, ids: &[EntityId]) -> Result<StepRecord> {
        let (g, o) = (side.index(), side.other().index());
        let dim = self.out_dim();
        let b = ids.len();
        let (tau, beta) = (self.cfg.temperature, self.cfg.beta);

        // Momentum embeddings: the positive batch itself and its partners.
        let fresh = encode_values(&self.momentum, &self.graphs[g], ids)?;
        let partner_ids: Vec<Option<EntityId>> = ids.iter().map(|&e| self.lookup.partner(side, e)).collect();
        let present: Vec<EntityId> = partner_ids.iter().flatten().copied().collect();
        let partner_rows = encode_values(&self.momentum, &self.graphs[o], &present)?;

        let mut tape = Tape::<f32>::new();
        let enc = encode_on_tape(&mut tape, &self.online, &self.graphs[g], ids)?;
        let queued: Vec<&[f32]> = self.queues[g].rows_except(None).collect();
        let same: Vec<Vec<&[f32]>> = (0..b)
            .map(|x| {
                (0..b)
                    .filter(|&y| y != x)
                    .map(|y| row(&fresh, y, dim))
                    .chain(queued.iter().copied())
                    .collect()
            })
            .collect();
        let negatives = same.first().map_or(0, Vec::len);

        let nce = if self.cfg.no_mcl {
            tape.constant_scalar(0.0)
        } else {
            let positives: Vec<&[f32]> = (0..b).map(|x| row(&fresh, x, dim)).collect();
            nce_loss(&mut tape, &enc.rows, &positives, &same, tau)?
        };
        let mut covered = 0;
        let icl = if self.cfg.no_icl {
            tape.constant_scalar(0.0)
        } else {
            let mut k = 0;
            let mut partners = Vec::with_capacity(b);
            let mut cross = Vec::with_capacity(b);
            for p in &partner_ids {
                match p {
                    Some(pid) => {
                        partners.push(Some(row(&partner_rows, k, dim)));
                        k += 1;
                        covered += 1;
                        cross.push(self.queues[o].rows_except(Some(*pid)).collect());
                    }
                    None => {
                        partners.push(None);
                        cross.push(Vec::new());
                    }
                }
            }
            icl_loss(&mut tape, &enc.rows, &partners, &same, &cross, tau, beta)?
        };
        if self.cfg.no_icl {
            covered = partner_ids.iter().filter(|p| p.is_some()).count();
        }
        let total = total_loss(&mut tape, nce, icl)?;
        let (nce_v, icl_v, total_v) = (tape.scalar(nce) as f64, tape.scalar(icl) as f64, tape.scalar(total) as f64);
        if !total_v.is_finite() {
            return Err(Error::Data(format!("non-finite loss at epoch {} step {}", self.epoch, self.step)));
        }
        tape.backward(total, self.online.params_mut())?;
        drop(same);
        drop(queued);
        self.adam.step(self.online.params_mut());
        momentum_update(self.online.params(), self.momentum.params_mut(), self.cfg.momentum)?;
        self.encoded = None;
        self.step += 1;
        let rec = StepRecord {
            epoch: self.epoch,
            step: self.step,
            side,
            nce: nce_v,
            icl: icl_v,
            total: total_v,
            lr: self.adam.learning_rate,
            pseudo_coverage: covered as f64 / b as f64,
            negatives,
            pushes: self.pushes[g],
        };
        self.steps.push(rec.clone());
        Ok(rec)
    }

    /// Shuffled per-graph batches (last partial batch dropped), interleaved
    /// by shuffling the combined schedule.
    fn schedule(&mut self) -> Vec<(Side, Vec<EntityId>)> {
        let b = self.cfg.batch_size;
        let mut sched = Vec::new();
        for side in [Side::G1, Side::G2] {
            let mut ids: Vec<EntityId> = (0..self.graphs[side.index()].num_entities()).collect();
            ids.shuffle(&mut self.rng);
            for chunk in ids.chunks_exact(b) {
                sched.push((side, chunk.to_vec()));
            }
        }
        sched.shuffle(&mut self.rng);
        sched
    }

    /// Validation Hits@1 (G1 → G2) with the current online encoder; NaN
    /// without a validation set.
    pub fn validation_hits1(&mut self) -> Result<f64> {
        if self.validation.is_empty() {
            return Ok(f64::NAN);
        }
        let dim = self.out_dim();
        let validation = self.validation.clone();
        let [v1, v2] = self.encoded()?;
        Ok(evaluate("G1->G2", v1, v2, dim, &validation, &[1])?.hits_at(1))
    }

    /// One pass: mine, sweep all batches, decay the learning rate, validate.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        self.epoch += 1;
        self.mine_pairs()?;
        let coverage = [self.lookup.coverage(Side::G1), self.lookup.coverage(Side::G2)];
        let first = self.steps.len();
        for (side, ids) in self.schedule() {
            self.process_batch(side, ids)?;
        }
        let lr = self.adam.learning_rate;
        self.adam.learning_rate *= self.cfg.lr_decay;
        let steps = &self.steps[first..];
        let mut m = EpochMetrics {
            epoch: self.epoch,
            steps: steps.len(),
            nce_sum: steps.iter().map(|s| s.nce).sum(),
            icl_sum: steps.iter().map(|s| s.icl).sum(),
            total_sum: steps.iter().map(|s| s.total).sum(),
            coverage,
            valid_hits1: f64::NAN,
            lr,
        };
        m.valid_hits1 = self.validation_hits1()?;
        self.history.push(m.clone());
        Ok(m)
    }

    /// Runs up to `epochs` epochs with early stopping on validation Hits@1.
    /// `observer` sees the trainer after every epoch.
    pub fn train(&mut self, mut observer: impl FnMut(&mut Trainer, &EpochMetrics) -> Result<()>) -> Result<TrainSummary> {
        let mut stopped_early = false;
        while self.epoch < self.cfg.epochs {
            let m = self.run_epoch()?;
            log::info!(
                "epoch {} steps {} loss {:.4} coverage {:.3}/{:.3} valid Hits@1 {:.4}",
                m.epoch,
                m.steps,
                m.total_sum / m.steps.max(1) as f64,
                m.coverage[0],
                m.coverage[1],
                m.valid_hits1
            );
            observer(self, &m)?;
            if m.valid_hits1.is_nan() {
                continue;
            }
            match &self.best {
                Some((_, best, _)) if m.valid_hits1 <= *best => {
                    self.since_best += 1;
                    if self.since_best > self.cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
                _ => {
                    self.best = Some((m.epoch, m.valid_hits1, self.checkpoint()));
                    self.since_best = 0;
                }
            }
        }
        let (best_epoch, best_valid_hits1) = self.best.as_ref().map_or((self.epoch, f64::NAN), |b| (b.0, b.1));
        Ok(TrainSummary {
            epochs_run: self.epoch,
            best_epoch,
            best_valid_hits1,
            stopped_early,
        })
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

pub const STEP_LOG_HEADER: &str = "epoch,step,kg,nce,icl,total,lr,pseudo_coverage";
pub const METRICS_HEADER: &str = "epoch,steps,nce_sum,icl_sum,total_sum,coverage_g1,coverage_g2,valid_hits1,lr";

pub fn step_log_csv(steps: &[StepRecord]) -> String {
    let mut s = format!("{STEP_LOG_HEADER}\n");
    for r in steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.side,
            num(r.nce),
            num(r.icl),
            num(r.total),
            num(r.lr),
            num(r.pseudo_coverage)
        );
    }
    s
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.steps,
            num(m.nce_sum),
            num(m.icl_sum),
            num(m.total_sum),
            num(m.coverage[0]),
            num(m.coverage[1]),
            num(m.valid_hits1),
            num(m.lr)
        );
    }
    s
}

/// Restores an online encoder from a checkpoint.
pub fn online_from_checkpoint(ck: &Checkpoint, slope: f64) -> Result<AggregatorParams<f32>> {
    let params = ck.params_with_prefix(ONLINE_PREFIX);
    if params.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no online parameters".into()));
    }
    AggregatorParams::from_params(params, slope)
}
