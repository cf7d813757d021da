//! Plain `key = value` run configuration.
//!
//! Every key has a default; unknown keys and unparsable values are collected
//! and reported together.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ModelConfig, TowerConfig};
use crate::strategies::{InitKind, StrategyConfig, UpdateKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tmr,
    ElectraBaseline,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tmr" => Ok(Self::Tmr),
            "electra_baseline" => Ok(Self::ElectraBaseline),
            _ => Err(format!("unknown mode {s:?} (tmr, electra_baseline)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tmr => "tmr",
            Self::ElectraBaseline => "electra_baseline",
        })
    }
}

macro_rules! config_keys {
    ($($name:ident : $ty:ty = $default:expr, $help:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $(pub $name: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        /// Every key with its description, in canonical order.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($name), $help),)*];

        impl Config {
            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                let value = value.trim();
                match key {
                    $(stringify!($name) => {
                        self.$name = value
                            .parse::<$ty>()
                            .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(self.$name.to_string()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    mode: Mode = Mode::Tmr, "tmr or electra_baseline";
    seed: u64 = 0, "run seed for every random stream";
    steps: u64 = 1000, "pretraining iterations";
    batch_size: usize = 16, "mini-batch size K";
    buffer_capacity: usize = 1000, "replay buffer size N";
    lambda: f64 = 50.0, "weight of the discriminator loss";
    mask_rate: f64 = 0.15, "fraction of non-CLS tokens masked";
    alpha: f64 = 1.0, "priority exponent for buffer sampling";
    priority_floor: bool = false, "clamp priorities to at least 1e-8";
    init_strategy: InitKind = InitKind::Average, "average, lsr or linucb";
    update_strategy: UpdateKind = UpdateKind::LossDiff, "loss_diff, grad_norm or grad_bound";
    ridge: f64 = 1.0, "LSR ridge regulariser";
    ucb_alpha: f64 = 1.0, "LinUCB exploration coefficient";
    lsr_refit_every: u64 = 100, "iterations between LSR refits";
    lr: f64 = 1e-3, "Adam base learning rate";
    warmup_steps: u64 = 100, "linear warmup length";
    corpus: String = String::new(), "corpus path, one document per line (empty: bundled 50-sentence corpus)";
    max_vocab: usize = 128, "vocabulary size cap including reserved ids";
    max_seq_len: usize = 32, "tokens per sequence including CLS";
    emb_dim: usize = 16, "shared embedding width";
    gen_layers: usize = 2, "generator blocks";
    gen_hidden: usize = 16, "generator hidden size";
    gen_heads: usize = 2, "generator attention heads";
    disc_layers: usize = 2, "discriminator blocks";
    disc_hidden: usize = 32, "discriminator hidden size";
    disc_heads: usize = 4, "discriminator attention heads";
    ffn_mult: usize = 4, "feed-forward width multiplier";
    init_std: f64 = 0.02, "standard deviation of weight init";
    eval_every: u64 = 50, "iterations between drift evaluations and buffer audits";
    drift_eval_masks: usize = 8, "fixed masks per corpus sequence in the drift set";
    drift_draws: usize = 4, "generator samples per masked position in the drift metric";
    checkpoint_every: u64 = 0, "checkpoint cadence (0: only first and last)";
    record_step_ms: bool = true, "write wall-clock step time (false writes 0 for byte-stable CSVs)";
    out_dir: String = "runs/default".to_string(), "output directory";
    jobs: usize = 1, "parallel fine-tuning workers for probe";
    probe_epochs: usize = 3, "fine-tuning epochs";
    probe_lr: f64 = 1e-4, "fine-tuning learning rate";
    probe_batch_size: usize = 16, "fine-tuning batch size";
    probe_seeds: usize = 3, "fine-tuning seeds per checkpoint";
}

const BUFFER_KEYS: &[&str] = &[
    "buffer_capacity",
    "alpha",
    "priority_floor",
    "init_strategy",
    "update_strategy",
    "ridge",
    "ucb_alpha",
    "lsr_refit_every",
];

fn positive(errs: &mut Vec<String>, key: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        errs.push(format!("{key} must be positive and finite, got {v}"));
    }
}

fn nonzero(errs: &mut Vec<String>, key: &str, v: u64) {
    if v == 0 {
        errs.push(format!("{key} must be at least 1"));
    }
}

impl Config {
    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_lines(text)?;
        Ok(cfg)
    }

    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        let mut errs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(format!("line {}: {e}", n + 1));
                    }
                }
                None => errs.push(format!("line {}: expected key = value, got {line:?}", n + 1)),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// All keys and values in canonical order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Every semantic problem, not only the first.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        nonzero(&mut e, "batch_size", self.batch_size as u64);
        nonzero(&mut e, "buffer_capacity", self.buffer_capacity as u64);
        positive(&mut e, "lambda", self.lambda);
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            e.push(format!("mask_rate must be in (0, 1), got {}", self.mask_rate));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            e.push(format!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        positive(&mut e, "lr", self.lr);
        positive(&mut e, "probe_lr", self.probe_lr);
        nonzero(&mut e, "eval_every", self.eval_every);
        nonzero(&mut e, "drift_eval_masks", self.drift_eval_masks as u64);
        nonzero(&mut e, "drift_draws", self.drift_draws as u64);
        nonzero(&mut e, "probe_epochs", self.probe_epochs as u64);
        nonzero(&mut e, "probe_batch_size", self.probe_batch_size as u64);
        nonzero(&mut e, "probe_seeds", self.probe_seeds as u64);
        nonzero(&mut e, "jobs", self.jobs as u64);
        if self.max_vocab < 5 {
            e.push(format!("max_vocab must be at least 5, got {}", self.max_vocab));
        }
        e.extend(self.strategy_config().validate());
        e.extend(self.model_config(self.max_vocab.max(5)).validate());
        e
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.buffer_capacity < self.batch_size {
            w.push(format!(
                "buffer_capacity {} is smaller than batch_size {}",
                self.buffer_capacity, self.batch_size
            ));
        }
        if self.mode == Mode::ElectraBaseline {
            let defaults = Config::default();
            let changed: Vec<_> = BUFFER_KEYS.iter().filter(|k| self.get(k) != defaults.get(k)).copied().collect();
            if !changed.is_empty() {
                w.push(format!("buffer settings ignored in electra_baseline mode: {}", changed.join(", ")));
            }
        }
        w
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            emb_dim: self.emb_dim,
            generator: TowerConfig {
                layers: self.gen_layers,
                hidden: self.gen_hidden,
                heads: self.gen_heads,
            },
            discriminator: TowerConfig {
                layers: self.disc_layers,
                hidden: self.disc_hidden,
                heads: self.disc_heads,
            },
            ffn_mult: self.ffn_mult,
            init_std: self.init_std,
        }
    }

    pub fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            init_kind: self.init_strategy,
            update_kind: self.update_strategy,
            ridge: self.ridge,
            ucb_alpha: self.ucb_alpha,
            feature_dim: self.max_seq_len,
            lsr_refit_every: self.lsr_refit_every,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.warmup_steps)
    }

    /// `--help` text listing every key with its default.
    pub fn help_text() -> String {
        let d = Config::default();
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Configuration keys (key = default  description):\n");
        for (k, help) in KEYS {
            let v = d.get(k).expect("listed key");
            let v = if v.is_empty() { "\"\"".to_string() } else { v };
            s.push_str(&format!("  {k:<width$} = {v:<14} {help}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let c = Config::parse("# comment\nsteps = 20\nmode=electra_baseline\nalpha = 0.5 # inline\n").unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.mode, Mode::ElectraBaseline);
        assert_eq!(c.alpha, 0.5);
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_error_reported() {
        let err = Config::parse("nope = 1\nsteps = x\nbad line\n").unwrap_err();
        match err {
            Error::Config(list) => {
                assert_eq!(list.len(), 3);
                assert!(list[0].contains("nope"));
                assert!(list[1].contains("steps"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation() {
        let mut c = Config::default();
        assert!(c.validate().is_empty(), "{:?}", c.validate());
        c.lambda = 0.0;
        c.gen_hidden = 64;
        c.mask_rate = 1.0;
        assert_eq!(c.validate().len(), 3, "{:?}", c.validate());
    }

    #[test]
    fn warnings() {
        let mut c = Config::default();
        c.mode = Mode::ElectraBaseline;
        c.alpha = 2.0;
        c.buffer_capacity = 4;
        let w = c.warnings();
        assert_eq!(w.len(), 2);
        assert!(w[1].contains("alpha"));
    }

    #[test]
    fn help_lists_every_key() {
        let h = Config::help_text();
        for (k, _) in KEYS {
            assert!(h.contains(k));
        }
        assert!(h.contains("lambda") && h.contains("50"));
    }
}
