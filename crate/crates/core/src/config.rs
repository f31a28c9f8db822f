//! Training configuration: a flat `key = value` file with overrides.
//!
//! Unknown keys are rejected so a typo never silently falls back to a
//! default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kg::NeighborOrder;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negative queue length L; the queue holds up to L+1 batches.
    pub queue_len: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub beta: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub neighbor_cap: usize,
    pub neighbor_order: NeighborOrder,
    pub seed: u64,
    pub patience: usize,
    pub valid_fraction: f64,
    pub heads: usize,
    /// Per-head width; 0 means the fused input width.
    pub head_dim: usize,
    pub gate_hidden: usize,
    /// Encoder output width; 0 means five times the name width.
    pub out_dim: usize,
    /// Leading input columns fed straight into the fusion layer.
    pub fusion_passthrough: usize,
    pub slope: f64,
    pub no_icl: bool,
    pub no_mcl: bool,
    pub no_rel: bool,
    pub no_desc: bool,
    pub no_name: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            queue_len: 32,
            momentum: 0.9999,
            temperature: 0.08,
            lambda: 1.0,
            beta: 0.9,
            learning_rate: 1e-6,
            lr_decay: 0.99,
            neighbor_cap: 15,
            neighbor_order: NeighborOrder::AscendingId,
            seed: 37,
            patience: 20,
            valid_fraction: 0.05,
            heads: 1,
            head_dim: 0,
            gate_hidden: 32,
            out_dim: 0,
            fusion_passthrough: 0,
            slope: 0.01,
            no_icl: false,
            no_mcl: false,
            no_rel: false,
            no_desc: false,
            no_name: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "queue_len",
    "momentum",
    "temperature",
    "lambda",
    "beta",
    "learning_rate",
    "lr_decay",
    "neighbor_cap",
    "neighbor_order",
    "seed",
    "patience",
    "valid_fraction",
    "heads",
    "head_dim",
    "gate_hidden",
    "out_dim",
    "fusion_passthrough",
    "slope",
    "no_icl",
    "no_mcl",
    "no_rel",
    "no_desc",
    "no_name",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "queue_len" => self.queue_len = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "neighbor_cap" => self.neighbor_cap = parse(key, v)?,
            "neighbor_order" => self.neighbor_order = v.parse().map_err(|e| Error::Config(format!("{e}")))?,
            "seed" => self.seed = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "valid_fraction" => self.valid_fraction = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "head_dim" => self.head_dim = parse(key, v)?,
            "gate_hidden" => self.gate_hidden = parse(key, v)?,
            "out_dim" => self.out_dim = parse(key, v)?,
            "fusion_passthrough" => self.fusion_passthrough = parse(key, v)?,
            "slope" => self.slope = parse(key, v)?,
            "no_icl" => self.no_icl = parse(key, v)?,
            "no_mcl" => self.no_mcl = parse(key, v)?,
            "no_rel" => self.no_rel = parse(key, v)?,
            "no_desc" => self.no_desc = parse(key, v)?,
            "no_name" => self.no_name = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Value-level checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.no_name && self.no_desc {
            return bad("no_name and no_desc together leave no input signal".into());
        }
        if self.no_icl && self.no_mcl {
            return bad("no_icl and no_mcl together leave no training objective".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        // Negated form also rejects NaN.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be positive and lr_decay in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad(format!("valid_fraction must be in [0, 1), got {}", self.valid_fraction));
        }
        if self.batch_size == 0 || self.heads == 0 || self.gate_hidden == 0 {
            return bad("batch_size, heads and gate_hidden must be positive".into());
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return bad(format!("slope must be in [0, 1), got {}", self.slope));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("queue_len", self.queue_len.to_string());
        put("momentum", self.momentum.to_string());
        put("temperature", self.temperature.to_string());
        put("lambda", self.lambda.to_string());
        put("beta", self.beta.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("neighbor_cap", self.neighbor_cap.to_string());
        put("neighbor_order", self.neighbor_order.to_string());
        put("seed", self.seed.to_string());
        put("patience", self.patience.to_string());
        put("valid_fraction", self.valid_fraction.to_string());
        put("heads", self.heads.to_string());
        put("head_dim", self.head_dim.to_string());
        put("gate_hidden", self.gate_hidden.to_string());
        put("out_dim", self.out_dim.to_string());
        put("fusion_passthrough", self.fusion_passthrough.to_string());
        put("slope", self.slope.to_string());
        put("no_icl", self.no_icl.to_string());
        put("no_mcl", self.no_mcl.to_string());
        put("no_rel", self.no_rel.to_string());
        put("no_desc", self.no_desc.to_string());
        put("no_name", self.no_name.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.queue_len, c.neighbor_cap, c.seed, c.epochs), (64, 32, 15, 37, 300));
        assert_eq!((c.momentum, c.temperature, c.lambda, c.beta, c.learning_rate), (0.9999, 0.08, 1.0, 0.9, 1e-6));
        assert_eq!(c.valid_fraction, 0.05);
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip_and_overrides() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nbatch_size = 16\n\nno_icl = true  # trailing\nneighbor_order = highest-degree\n", "t")
            .unwrap();
        assert_eq!(c.batch_size, 16);
        assert!(c.no_icl);
        assert_eq!(c.neighbor_order, NeighborOrder::HighestDegreeFirst);
        c.apply_override("beta=0.5").unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.apply_text("batchsize = 3", "t"), Err(Error::Config(_))));
        assert!(c.apply_text("beta = lots", "t").is_err());
        assert!(c.apply_override("beta").is_err());
        let mut c = TrainConfig::default();
        c.no_name = true;
        c.no_desc = true;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }
}
