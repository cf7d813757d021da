//! The joint generator/discriminator loop with the replay buffer in between.

mod bench;
mod drift;
mod run;

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

pub use bench::{bench_strategies, BenchReport, BenchRow, OrderingCheck, BENCH_STRATEGIES};
pub use drift::{drift_eval_set, drift_metric, DriftResult};
pub use run::{checkpoint_path, run_pretraining, write_metrics_header, RunReport, METRICS_COLUMNS};

pub use crate::config::Mode;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{combine_losses, sample_replacements, Adam, Checkpoint, Graph, Model, Tensor};
use crate::nn::loss::bce_logit_grads;
use crate::replay::{BufferEntry, Draw, OpCounters, ReplayBuffer};
use crate::rng::{stream, Stream, StreamRng};
use crate::strategies::{update_weight_grad_bound, update_weight_grad_norm, update_weight_loss_diff, UpdateKind, WeightPolicy};
use crate::text::{
    assemble_corrupted, mask_sequence, replaced_fraction, sequences_from_corpus, CorruptedExample, MaskedExample,
    TokenSequence, Vocab, BUNDLED_CORPUS,
};

/// Which loss terms drive the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_G + lambda * L_D`.
    Joint,
    /// `L_G` only; the discriminator is still evaluated for metrics.
    GeneratorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_combined: f64,
    pub drift_exact_recovery: f64,
    pub fresh_replaced_fraction: f64,
    pub buffer_live: usize,
    pub buffer_mean_w: f64,
    pub buffer_min_w: f64,
    pub buffer_max_w: f64,
    pub step_ms: f64,
    /// True when the discriminator trained on the fresh batch.
    pub cold: bool,
    pub sampled_age_mean: f64,
    pub sampled_age_max: u64,
    /// Draws whose entry was inserted before this step.
    pub older_draws: usize,
    pub backward_calls: u64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.loss_g,
            self.loss_d,
            self.loss_combined,
            self.drift_exact_recovery,
            self.fresh_replaced_fraction,
            self.buffer_mean_w,
            self.buffer_min_w,
            self.buffer_max_w,
            self.step_ms,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Counts accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrainCounters {
    pub backward_calls: u64,
    pub weight_update_attempts: u64,
    pub weight_updates_applied: u64,
    pub stale_updates: u64,
    pub label_audits: u64,
    pub cold_steps: u64,
}

pub struct Trainer {
    config: Config,
    vocab: Vocab,
    sequences: Vec<TokenSequence>,
    model: Model,
    adam: Adam,
    buffer: ReplayBuffer,
    policy: WeightPolicy,
    objective: Objective,
    data_rng: StreamRng,
    model_rng: StreamRng,
    buffer_rng: StreamRng,
    drift_set: Vec<MaskedExample>,
    last_drift: f64,
    step: u64,
    counters: TrainCounters,
}

impl Trainer {
    /// Build from a configuration, reading the corpus it names.
    pub fn new(config: &Config) -> Result<Self> {
        let text = if config.corpus.is_empty() {
            BUNDLED_CORPUS.to_string()
        } else {
            std::fs::read_to_string(&config.corpus).map_err(|e| Error::io(&config.corpus, e))?
        };
        Self::from_corpus(config, &text)
    }

    pub fn from_corpus(config: &Config, corpus: &str) -> Result<Self> {
        let mut errs = config.validate();
        // lambda = 0 is permitted here so the stopped-gradient check can run.
        errs.retain(|e| !(config.lambda == 0.0 && e.starts_with("lambda")));
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let vocab = Vocab::build(corpus, config.max_vocab)?;
        let sequences = sequences_from_corpus(corpus, &vocab, config.max_seq_len)?;
        let model = Model::new(config.model_config(vocab.len()), &mut stream(config.seed, Stream::Init))?;
        let adam = Adam::new(config.adam_config(), model.params());
        let buffer = ReplayBuffer::new(config.buffer_capacity, config.alpha)?.with_priority_floor(config.priority_floor);
        let policy = WeightPolicy::new(config.strategy_config(), vocab.len());
        let drift_set = drift_eval_set(&sequences, config.drift_eval_masks, config.mask_rate, config.seed)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            sequences,
            model,
            adam,
            buffer,
            policy,
            objective: Objective::Joint,
            data_rng: stream(config.seed, Stream::Data),
            model_rng: stream(config.seed, Stream::Model),
            buffer_rng: stream(config.seed, Stream::Buffer),
            drift_set,
            last_drift: f64::NAN,
            step: 0,
            counters: TrainCounters::default(),
        })
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = objective;
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn policy(&self) -> &WeightPolicy {
        &self.policy
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn counters(&self) -> TrainCounters {
        self.counters
    }

    pub fn buffer_counters(&self) -> OpCounters {
        self.buffer.counters()
    }

    pub fn drift_set(&self) -> &[MaskedExample] {
        &self.drift_set
    }

    /// Exact-recovery fraction of the current generator on the fixed drift set.
    pub fn drift(&self) -> Result<DriftResult> {
        drift_metric(&self.model, &self.drift_set, self.config.seed, self.config.drift_draws)
    }

    fn draw_masked(&mut self) -> Result<Vec<MaskedExample>> {
        (0..self.config.batch_size)
            .map(|_| {
                let i = self.data_rng.random_range(0..self.sequences.len());
                mask_sequence(&self.sequences[i], self.config.mask_rate, &mut self.data_rng)
            })
            .collect()
    }

    /// One iteration: mask, generate, corrupt, store, replay, update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step;
        let k = self.config.batch_size;
        let lambda = self.config.lambda;
        let at = |e: Error| match e {
            Error::Numerical { location } => Error::NumericalAtStep { step, location },
            other => other,
        };

        if step.is_multiple_of(self.config.eval_every) {
            self.last_drift = self.drift().map_err(at)?.exact_recovery;
            self.audit_buffer()?;
        }

        let masked = self.draw_masked()?;
        let mut g = Graph::new();
        let mrefs: Vec<&MaskedExample> = masked.iter().collect();
        let gen = self.model.generator_forward(&mut g, &mrefs).map_err(at)?;
        let log_probs = g.log_probs(gen.loss).expect("generator loss node").clone();
        let sampled = sample_replacements(&log_probs, &mut self.model_rng)?;
        let mut fresh = Vec::with_capacity(k);
        let mut offset = 0;
        for (m, &rows) in masked.iter().zip(&gen.rows_per_example) {
            fresh.push(assemble_corrupted(m, &sampled[offset..offset + rows])?);
            offset += rows;
        }
        let fresh_replaced_fraction = fresh.iter().map(replaced_fraction).sum::<f64>() / k as f64;

        let mut draws: Vec<Draw> = Vec::new();
        let cold;
        match self.config.mode {
            Mode::ElectraBaseline => cold = false,
            Mode::Tmr => {
                cold = self.buffer.live_count() < k;
                self.policy.maybe_refit(step, &self.buffer)?;
                let stats = self.buffer.stats();
                for ex in &fresh {
                    let w = self.policy.initial_weight(&stats, &ex.tokens)?;
                    self.buffer.add(ex.clone(), w, step)?;
                }
                if !cold {
                    draws = self.buffer.sample(k, &mut self.buffer_rng)?;
                }
            }
        }
        if cold {
            self.counters.cold_steps += 1;
        }
        let disc_batch: Vec<&CorruptedExample> = if draws.is_empty() {
            fresh.iter().collect()
        } else {
            draws.iter().map(|d| &d.example).collect()
        };
        let disc = self.model.discriminator_forward(&mut g, &disc_batch).map_err(at)?;
        let loss_g = g.value(gen.loss).item();
        let loss_d = g.value(disc.loss).item();
        let root = match self.objective {
            Objective::Joint => combine_losses(&mut g, Some(gen.loss), Some(disc.loss), lambda)?,
            Objective::GeneratorOnly => gen.loss,
        };
        let grads = g.backward(root, self.model.params())?;
        let mut backward_calls = 1;
        if !grads.is_finite() {
            return Err(Error::NumericalAtStep {
                step,
                location: "gradients".into(),
            });
        }

        let norms = if !draws.is_empty() && self.config.update_strategy == UpdateKind::GradNorm {
            backward_calls += disc_batch.len() as u64;
            Some(self.model.per_example_grad_norms(&disc_batch).map_err(at)?)
        } else {
            None
        };
        self.adam.step(self.model.params_mut(), &grads)?;
        self.counters.backward_calls += backward_calls;

        let mut ages = Vec::with_capacity(draws.len());
        for (i, d) in draws.iter().enumerate() {
            ages.push(step - d.insert_step);
            let loss = disc.per_example_loss[i];
            let new_weight = match self.config.update_strategy {
                UpdateKind::LossDiff => update_weight_loss_diff(d.last_loss, loss),
                UpdateKind::GradNorm => Some(update_weight_grad_norm(norms.as_ref().expect("norms computed")[i])),
                UpdateKind::GradBound => Some(update_weight_grad_bound(&bce_logit_grads(
                    disc.example_logits(&g, i),
                    disc.example_targets(i),
                ))),
            };
            self.counters.weight_update_attempts += 1;
            if let Some(w) = new_weight {
                match self.buffer.update(d.entry_id, w) {
                    Ok(()) => self.counters.weight_updates_applied += 1,
                    Err(e) if e.is_stale() => self.counters.stale_updates += 1,
                    Err(e) => return Err(e),
                }
            }
            if let Some(prev) = d.last_loss {
                self.policy.observe_reward(&d.example.tokens, (loss - prev).abs())?;
            }
            match self.buffer.record_loss(d.entry_id, loss) {
                Ok(()) => {}
                Err(e) if e.is_stale() => {}
                Err(e) => return Err(e),
            }
        }

        let stats = self.buffer.stats();
        self.step += 1;
        let metrics = StepMetrics {
            step,
            loss_g,
            loss_d,
            loss_combined: loss_g + lambda * loss_d,
            drift_exact_recovery: self.last_drift,
            fresh_replaced_fraction,
            buffer_live: stats.live_count,
            buffer_mean_w: stats.mean_weight,
            buffer_min_w: stats.min_weight,
            buffer_max_w: stats.max_weight,
            step_ms: started.elapsed().as_secs_f64() * 1e3,
            cold,
            sampled_age_mean: if ages.is_empty() { 0.0 } else { ages.iter().sum::<u64>() as f64 / ages.len() as f64 },
            sampled_age_max: ages.iter().copied().max().unwrap_or(0),
            older_draws: ages.iter().filter(|&&a| a > 0).count(),
            backward_calls,
        };
        if !metrics.is_finite() {
            return Err(Error::NumericalAtStep {
                step,
                location: "step metrics".into(),
            });
        }
        Ok(metrics)
    }

    /// Every stored example's labels must match a recomputation.
    fn audit_buffer(&mut self) -> Result<()> {
        if let Some(bad) = self.buffer.entries().find(|e| !e.example.labels_consistent()) {
            return Err(Error::Validation(format!("buffer entry {} has inconsistent labels", bad.entry_id)));
        }
        self.counters.label_audits += 1;
        Ok(())
    }

    /// Model, vocabulary, configuration and buffer contents.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> =
            self.model.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let mut meta = vec![("adam_step".to_string(), self.adam.step_count().to_string())];
        if self.config.mode == Mode::Tmr {
            meta.push(("buffer.next_id".into(), self.buffer.next_id().to_string()));
            tensors.extend(buffer_tensors(&self.buffer, self.config.max_seq_len));
        }
        Checkpoint {
            step: self.step,
            mode: self.config.mode.to_string(),
            config: self.config.to_pairs(),
            vocab: self.vocab.tokens().to_vec(),
            meta,
            tensors,
        }
    }
}

/// Columns of `buffer.meta`.
pub const BUFFER_META_COLUMNS: [&str; 7] =
    ["slot", "entry_id", "weight", "insert_step", "sample_count", "last_loss", "has_last_loss"];

fn buffer_tensors(buffer: &ReplayBuffer, max_len: usize) -> Vec<(String, Tensor)> {
    let live: Vec<(usize, &BufferEntry)> = buffer.slots().collect();
    let n = live.len();
    let mut tokens = vec![0.0; n * max_len];
    let mut original = vec![0.0; n * max_len];
    let mut mask = vec![0.0; n * max_len];
    let mut lengths = vec![0.0; n];
    let mut meta = Vec::with_capacity(n * BUFFER_META_COLUMNS.len());
    for (r, (slot, e)) in live.iter().enumerate() {
        let ex = &e.example;
        for (t, (&a, &b)) in ex.tokens.iter().zip(ex.original.ids()).enumerate() {
            tokens[r * max_len + t] = a as f64;
            original[r * max_len + t] = b as f64;
        }
        for &p in &ex.mask_positions {
            mask[r * max_len + p] = 1.0;
        }
        lengths[r] = ex.tokens.len() as f64;
        meta.extend([
            *slot as f64,
            e.entry_id as f64,
            e.weight,
            e.insert_step as f64,
            e.sample_count as f64,
            e.last_loss.unwrap_or(0.0),
            if e.last_loss.is_some() { 1.0 } else { 0.0 },
        ]);
    }
    let t = |shape: &[usize], v: Vec<f64>| Tensor::from_vec(shape, v).expect("buffer tensor shape");
    vec![
        ("buffer.tokens".into(), t(&[n, max_len], tokens)),
        ("buffer.original".into(), t(&[n, max_len], original)),
        ("buffer.lengths".into(), t(&[n], lengths)),
        ("buffer.mask".into(), t(&[n, max_len], mask)),
        ("buffer.meta".into(), t(&[n, BUFFER_META_COLUMNS.len()], meta)),
    ]
}

/// Rebuild the replay buffer stored in a checkpoint.
pub fn restore_buffer(ck: &Checkpoint, capacity: usize, alpha: f64, floor: bool) -> Result<ReplayBuffer> {
    let err = |reason: &str| Error::Validation(format!("checkpoint buffer: {reason}"));
    let get = |name: &str| ck.tensor(name).ok_or_else(|| err(&format!("missing {name}")));
    let (tokens, original, mask, lengths, meta) = (
        get("buffer.tokens")?,
        get("buffer.original")?,
        get("buffer.mask")?,
        get("buffer.lengths")?,
        get("buffer.meta")?,
    );
    let next_id: u64 = ck
        .meta_value("buffer.next_id")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err("missing next_id"))?;
    let vocab = ck.vocab.len();
    let n = lengths.len();
    let max_len = tokens.len().checked_div(n).unwrap_or(0);
    let mut entries = Vec::with_capacity(n);
    for r in 0..n {
        let len = lengths.data()[r] as usize;
        let row = |t: &Tensor| t.data()[r * max_len..r * max_len + len].iter().map(|&v| v as u32).collect::<Vec<_>>();
        let seq = TokenSequence::new(row(original), vocab)?;
        let positions = (0..len).filter(|&p| mask.data()[r * max_len + p] != 0.0).collect();
        let example = CorruptedExample::from_parts(row(tokens), seq, positions)?;
        let m = meta.row(r);
        entries.push((
            m[0] as usize,
            BufferEntry {
                entry_id: m[1] as u64,
                example,
                weight: m[2],
                insert_step: m[3] as u64,
                sample_count: m[4] as u64,
                last_loss: if m[6] != 0.0 { Some(m[5]) } else { None },
            },
        ));
    }
    ReplayBuffer::restore(capacity, alpha, floor, next_id, entries)
}
