//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{encode_all, AggregatorParams};
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::embedding::read_embeddings;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, RankingResult, DEFAULT_NS};
use crate::kg::{split_validation, AlignmentSet, Side};
use crate::miner::mine;
use crate::synth::{generate, SynthConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::trainer::{aggregator_config, metrics_csv, online_from_checkpoint, step_log_csv, Trainer};

pub const THREADS_ENV: &str = "KGALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "kgalign", version, about = "Self-supervised entity alignment between two knowledge graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder on a dataset directory.
    Train(TrainArgs),
    /// Rank gold counterparts with a trained checkpoint.
    Eval(EvalArgs),
    /// Dump mined pseudo pairs for inspection.
    MineAudit(MineArgs),
    /// Generate a synthetic twin-graph dataset.
    Synth(SynthArgs),
    /// Print header and norm statistics of an embedding file.
    InspectEmbeddings(InspectArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_icl: bool,
    #[arg(long)]
    pub no_mcl: bool,
    #[arg(long)]
    pub no_rel: bool,
    #[arg(long)]
    pub no_desc: bool,
    #[arg(long)]
    pub no_name: bool,
}

impl ConfigArgs {
    /// Defaults, then `base` (if any), then the config file, then flags.
    pub fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut cfg = base.unwrap_or_default();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.no_icl |= self.no_icl;
        cfg.no_mcl |= self.no_mcl;
        cfg.no_rel |= self.no_rel;
        cfg.no_desc |= self.no_desc;
        cfg.no_name |= self.no_name;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (kg1/, kg2/, alignments.tsv).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, logs and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Allow a dataset with a different relation vocabulary; relation
    /// embeddings are re-initialized from its relation names.
    #[arg(long)]
    pub transfer: bool,
    /// Evaluate on every gold pair instead of the held-out split.
    #[arg(long)]
    pub all_pairs: bool,
    /// Write per-query ranks as TSV.
    #[arg(long)]
    pub dump_ranks: Option<PathBuf>,
    /// Write `direction,N,hits,queries` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder to mine with; a freshly initialized one when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output TSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch stamp written to every row.
    #[arg(long, default_value_t = 0)]
    pub epoch: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub entities: usize,
    #[arg(long, default_value_t = 8)]
    pub relations: usize,
    #[arg(long, default_value_t = 3.0)]
    pub degree: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 37)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub name_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub desc_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub rel_dim: usize,
    /// Omit description files.
    #[arg(long)]
    pub no_descriptions: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Reproducibility record written next to training outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub digests: Vec<(String, String)>,
    pub version: String,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "seed = {}", self.config.seed);
        s.push_str("[inputs]\n");
        for (p, d) in &self.digests {
            let _ = writeln!(s, "{p} = sha256:{d}");
        }
        s.push_str("[timings]\n");
        for (k, t) in &self.timings {
            let _ = writeln!(s, "{k} = {t:.3}s");
        }
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        s
    }
}

/// Sidecar written next to a checkpoint: `key = value` lines, then the
/// training config after a `[config]` line.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn write_sidecar(checkpoint: &Path, cfg: &TrainConfig, epoch: usize, valid: f64) -> Result<()> {
    let text = format!(
        "checkpoint = {}\nepoch = {epoch}\nvalid_hits1 = {valid}\n[config]\n{}",
        checkpoint.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        cfg.to_text()
    );
    write_file(&sidecar_path(checkpoint), &text)
}

/// Training config recorded in a checkpoint's sidecar, if present.
pub fn sidecar_config(checkpoint: &Path) -> Result<Option<TrainConfig>> {
    let p = sidecar_path(checkpoint);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let body = text
        .split_once("[config]\n")
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Format(format!("{}: no [config] section", p.display())))?;
    let mut cfg = TrainConfig::default();
    cfg.apply_text(body, &p.display().to_string())?;
    Ok(Some(cfg))
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg = args.config.resolve(None)?;
    let ds = Dataset::load(&args.data)?;
    let digests = Dataset::digests(&args.data)?;
    let (_, validation) = split_validation(&ds.alignments, cfg.valid_fraction, cfg.seed);
    let graphs = ds.inputs(&cfg)?;
    let load_secs = t0.elapsed().as_secs_f64();
    println!("{}", cfg.to_text().trim_end().replace('\n', ", "));

    let mut trainer = Trainer::new(cfg.clone(), graphs, validation, ds.name_dim())?;
    let t1 = Instant::now();
    let summary = trainer.train(|_, m| {
        println!(
            "epoch {:>4}  steps {:>5}  loss {:.5}  coverage {:.3}/{:.3}  valid Hits@1 {:.4}",
            m.epoch,
            m.steps,
            m.total_sum / m.steps.max(1) as f64,
            m.coverage[0],
            m.coverage[1],
            m.valid_hits1
        );
        Ok(())
    })?;
    let train_secs = t1.elapsed().as_secs_f64();

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let final_path = args.out.join("final.iclc");
    write_checkpoint(&final_path, &trainer.checkpoint())?;
    let last_valid = trainer.history().last().map_or(f64::NAN, |m| m.valid_hits1);
    write_sidecar(&final_path, &cfg, summary.epochs_run, last_valid)?;
    let best_path = args.out.join("best.iclc");
    match trainer.best_checkpoint() {
        Some(ck) => {
            write_checkpoint(&best_path, ck)?;
            write_sidecar(&best_path, &cfg, summary.best_epoch, summary.best_valid_hits1)?;
        }
        None => {
            write_checkpoint(&best_path, &trainer.checkpoint())?;
            write_sidecar(&best_path, &cfg, summary.epochs_run, last_valid)?;
        }
    }
    write_file(&args.out.join("metrics.csv"), &metrics_csv(trainer.history()))?;
    write_file(&args.out.join("steps.csv"), &step_log_csv(trainer.step_log()))?;
    let manifest = RunManifest {
        config: cfg,
        digests,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timings: vec![("load".into(), load_secs), ("train".into(), train_secs)],
    };
    write_file(&args.out.join("manifest.txt"), &manifest.to_text())?;
    println!(
        "trained {} epochs (best epoch {}, valid Hits@1 {:.4}{}); outputs in {}",
        summary.epochs_run,
        summary.best_epoch,
        summary.best_valid_hits1,
        if summary.stopped_early { ", stopped early" } else { "" },
        args.out.display()
    );
    Ok(())
}

/// Loads the online encoder and fits it to `ds`. Without `transfer`, the
/// relation tables must match the dataset exactly.
pub fn load_encoder(ck: &Checkpoint, ds: &Dataset, cfg: &TrainConfig, transfer: bool) -> Result<AggregatorParams<f32>> {
    let mut enc = online_from_checkpoint(ck, cfg.slope)?;
    let c = enc.config().clone();
    let input_dim = ds.name_dim() + ds.desc_dim();
    if c.input_dim != input_dim {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}-dim inputs, dataset provides {input_dim}",
            c.input_dim
        )));
    }
    if c.use_relations {
        if ds.relation_dim() != c.rel_dim {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {}-dim relation embeddings, dataset provides {}",
                c.rel_dim,
                ds.relation_dim()
            )));
        }
        for side in [Side::G1, Side::G2] {
            let names = &ds.graphs[side.index()].relation_names;
            if names.count() != c.relation_counts[side.index()] {
                if !transfer {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint has {} {side} relations, dataset has {} (use --transfer)",
                        c.relation_counts[side.index()],
                        names.count()
                    )));
                }
                enc.reset_relation_table(side, names)?;
            }
        }
    }
    Ok(enc)
}

/// Both ranking directions for `gold` with encoder `enc`.
pub fn evaluate_dataset(enc: &AggregatorParams<f32>, ds: &Dataset, cfg: &TrainConfig, gold: &AlignmentSet) -> Result<[RankingResult; 2]> {
    let [g1, g2] = ds.inputs(cfg)?;
    let v1 = encode_all(enc, &g1)?;
    let v2 = encode_all(enc, &g2)?;
    let dim = enc.config().out_dim;
    Ok([
        evaluate("G1->G2", &v1, &v2, dim, gold, &DEFAULT_NS)?,
        evaluate("G2->G1", &v2, &v1, dim, &gold.swapped(), &DEFAULT_NS)?,
    ])
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let cfg = args.config.resolve(sidecar_config(&args.checkpoint)?)?;
    let ds = Dataset::load(&args.data)?;
    let enc = load_encoder(&ck, &ds, &cfg, args.transfer)?;
    let gold = if args.all_pairs {
        ds.alignments.clone()
    } else {
        split_validation(&ds.alignments, cfg.valid_fraction, cfg.seed).0
    };
    let results = evaluate_dataset(&enc, &ds, &cfg, &gold)?;
    for r in &results {
        println!("{r}");
    }
    if let Some(p) = &args.csv {
        let mut s = String::from("direction,N,hits,queries\n");
        for r in &results {
            s.push_str(&r.csv_rows());
        }
        write_file(p, &s)?;
    }
    if let Some(p) = &args.dump_ranks {
        let mut s = String::from("direction\tsrc_id\tgold_id\trank\n");
        for (r, pairs) in results.iter().zip([gold.clone(), gold.swapped()]) {
            for (&(a, b), rank) in pairs.pairs.iter().zip(&r.ranks) {
                let _ = writeln!(s, "{}\t{a}\t{b}\t{rank}", r.direction);
            }
        }
        write_file(p, &s)?;
    }
    Ok(())
}

pub fn cmd_mine_audit(args: &MineArgs) -> Result<()> {
    let ds = Dataset::load(&args.data)?;
    let (enc, cfg) = match &args.checkpoint {
        Some(p) => {
            let cfg = args.config.resolve(sidecar_config(p)?)?;
            (load_encoder(&read_checkpoint(p)?, &ds, &cfg, false)?, cfg)
        }
        None => {
            let cfg = args.config.resolve(None)?;
            let graphs = ds.inputs(&cfg)?;
            let ac = aggregator_config(&cfg, &graphs, ds.name_dim())?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let enc = AggregatorParams::init(ac, [&graphs[0].relation_names, &graphs[1].relation_names], &mut rng)?;
            (enc, cfg)
        }
    };
    let [g1, g2] = ds.inputs(&cfg)?;
    let v1 = encode_all(&enc, &g1)?;
    let v2 = encode_all(&enc, &g2)?;
    let dim = enc.config().out_dim;
    let mut s = String::from("epoch\tsrc_kg\tsrc_id\tdst_id\tdistance\n");
    for set in [
        mine(Side::G1, &v1, &v2, dim, cfg.lambda, args.epoch)?,
        mine(Side::G2, &v2, &v1, dim, cfg.lambda, args.epoch)?,
    ] {
        for p in &set.pairs {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", set.epoch, set.source, p.source, p.partner, p.distance);
        }
        println!("{}: {} pairs, coverage {:.4}", set.source, set.pairs.len(), set.coverage());
    }
    write_file(&args.out, &s)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        entities: args.entities,
        relations: args.relations,
        degree: args.degree,
        name_dim: args.name_dim,
        desc_dim: args.desc_dim,
        rel_dim: args.rel_dim,
        sigma: args.sigma,
        dropout: args.dropout,
        seed: args.seed,
        descriptions: !args.no_descriptions,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    ds.save(&args.out)?;
    println!(
        "wrote {} + {} entities, {} gold pairs to {}",
        ds.graphs[0].kg.num_entities(),
        ds.graphs[1].kg.num_entities(),
        ds.alignments.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let t = read_embeddings(&args.path)?;
    let norms: Vec<f64> = (0..t.count())
        .map(|i| t.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &n| (a.min(n), b.max(n)));
    println!("kind      {:?}", t.kind());
    println!("count     {}", t.count());
    println!("dim       {}", t.dim());
    println!("zero rows {zero}");
    if !norms.is_empty() {
        println!("norm      min {lo:.6} max {hi:.6}");
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::MineAudit(a) => cmd_mine_audit(a),
        Command::Synth(a) => cmd_synth(a),
        Command::InspectEmbeddings(a) => cmd_inspect(a),
    }
}
