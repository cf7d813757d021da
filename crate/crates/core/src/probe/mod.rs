//! Downstream probe: fine-tune a checkpoint's discriminator with a softmax
//! head on the CLS hidden state and report dev accuracy.
//!
//! Only `emb`, `disc.*` and the probe head take part. Generator tensors are
//! never read from the blob, which [`FineTuneResult::trace`] records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::gradcheck::Parameterized;
use crate::nn::{Adam, AdamConfig, Checkpoint, Graph, LoadTrace, Model, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::{stream, Stream};
use crate::text::{tokenize, TokenId, TokenSequence, Vocab};

const HEAD_INIT_STD: f64 = 0.02;

/// Tensors a probe is allowed to read.
pub fn probe_reads(name: &str) -> bool {
    name == "emb" || name.starts_with("disc.")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledText {
    pub label: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeTask {
    pub train: Vec<LabelledText>,
    pub dev: Vec<LabelledText>,
    pub classes: usize,
}

impl ProbeTask {
    /// Parse `label<TAB>text` lines. Every fourth line (index % 4 == 3) goes to dev.
    pub fn parse(tsv: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        for (n, line) in tsv.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some((l, text)) => match l.trim().parse::<usize>() {
                    Ok(label) => rows.push(LabelledText {
                        label,
                        text: text.to_string(),
                    }),
                    Err(_) => errors.push(format!("line {}: bad label {l:?}", n + 1)),
                },
                None => errors.push(format!("line {}: expected label<TAB>text", n + 1)),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let (mut train, mut dev) = (Vec::new(), Vec::new());
        for (i, r) in rows.into_iter().enumerate() {
            if i % 4 == 3 {
                dev.push(r);
            } else {
                train.push(r);
            }
        }
        Self::from_split(train, dev)
    }

    pub fn from_split(train: Vec<LabelledText>, dev: Vec<LabelledText>) -> Result<Self> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Validation("probe task needs train and dev examples".into()));
        }
        let classes = train.iter().chain(&dev).map(|r| r.label).max().unwrap_or(0) + 1;
        if classes < 2 {
            return Err(Error::Validation("probe task needs at least two classes".into()));
        }
        Ok(Self { train, dev, classes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Same texts with train labels permuted. A control: dev accuracy should
    /// fall to chance.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Probe);
        let mut labels: Vec<usize> = self.train.iter().map(|r| r.label).collect();
        labels.shuffle(&mut rng);
        let mut out = self.clone();
        for (r, l) in out.train.iter_mut().zip(labels) {
            r.label = l;
        }
        out
    }
}

/// Build the bundled binary task from a corpus: each line appears once
/// unchanged (label 0) and once with two words swapped for other corpus
/// words (label 1). Lines are shuffled and written as TSV.
pub fn make_probe_task(corpus: &str, seed: u64) -> Result<String> {
    let lines: Vec<Vec<String>> = corpus
        .lines()
        .map(|l| tokenize(l).collect::<Vec<_>>())
        .filter(|w| w.len() >= 3)
        .collect();
    let mut words: Vec<&str> = lines.iter().flatten().map(String::as_str).collect();
    words.sort_unstable();
    words.dedup();
    if lines.is_empty() || words.len() < 2 {
        return Err(Error::Validation("corpus too small for a probe task".into()));
    }
    let mut rng = stream(seed, Stream::Probe);
    let mut rows = Vec::with_capacity(2 * lines.len());
    for line in &lines {
        rows.push((0, line.join(" ")));
        let mut changed = line.clone();
        for pos in rand::seq::index::sample(&mut rng, line.len(), 2) {
            let w = loop {
                let w = *words.choose(&mut rng).expect("nonempty");
                if w != line[pos] {
                    break w;
                }
            };
            changed[pos] = w.to_string();
        }
        rows.push((1, changed.join(" ")));
    }
    rows.shuffle(&mut rng);
    let mut out = String::new();
    for (l, t) in rows {
        writeln!(out, "{l}\t{t}").expect("write to string");
    }
    Ok(out)
}

/// `-log softmax(W h)[class]` for a single example. `w` is `[C, H]`.
pub fn classify_loss(h: &[f64], w: &Tensor, class: usize) -> f64 {
    let (c, hd) = w.dims2();
    let logits: Vec<f64> = (0..c)
        .map(|k| w.row(k).iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    debug_assert_eq!(hd, h.len());
    lse - logits[class]
}

/// Discriminator body plus a `[C, H]` softmax head.
#[derive(Debug, Clone)]
pub struct Classifier {
    model: Model,
    head: ParamId,
    classes: usize,
}

impl Parameterized for Classifier {
    fn store(&self) -> &ParamStore {
        self.model.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }
}

pub struct ClassifierOutput {
    pub graph: Graph,
    pub loss: NodeId,
    pub logits: NodeId,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(mut model: Model, classes: usize, rng: &mut R) -> Result<Self> {
        let h = model.config().discriminator.hidden;
        let dist = Normal::new(0.0, HEAD_INIT_STD).expect("positive std");
        let w = Tensor::from_vec(&[classes, h], (0..classes * h).map(|_| dist.sample(rng)).collect())?;
        let head = model.params_mut().insert("probe.head_w", w)?;
        Ok(Self { model, head, classes })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn head_id(&self) -> ParamId {
        self.head
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Parameters updated by fine-tuning: discriminator body, embedding and head.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.model.discriminator_ids();
        let disc_head = self.model.disc_head_id();
        ids.retain(|&id| id != disc_head);
        ids.push(self.head);
        ids
    }

    pub fn forward(&self, seqs: &[&[TokenId]], labels: &[usize]) -> Result<ClassifierOutput> {
        let mut g = Graph::new();
        let (hidden, layout) = self.model.discriminator_hidden(&mut g, seqs)?;
        let cls_rows = (0..layout.batch).map(|b| layout.row(b, 0)).collect();
        let cls = g.gather(hidden, cls_rows)?;
        let w = g.param(self.model.params(), self.head);
        let logits = g.matmul_bt(cls, w)?;
        let loss = g.softmax_xent(logits, labels.to_vec())?;
        g.check_finite(loss, "probe loss")?;
        Ok(ClassifierOutput { graph: g, loss, logits })
    }

    pub fn predict(&self, seqs: &[&[TokenId]]) -> Result<Vec<usize>> {
        let out = self.forward(seqs, &vec![0; seqs.len()])?;
        let logits = out.graph.value(out.logits);
        Ok((0..seqs.len())
            .map(|b| {
                logits
                    .row(b)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl FineTuneOptions {
    pub fn from_config(cfg: &Config, seed: u64) -> Self {
        Self {
            epochs: cfg.probe_epochs,
            lr: cfg.probe_lr,
            batch_size: cfg.probe_batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneResult {
    pub dev_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub trace: LoadTrace,
    pub mode: String,
    pub pretrain_step: u64,
}

/// Model and vocabulary from a checkpoint, reading only probe tensors.
pub fn load_probe_body(manifest: &Path) -> Result<(Model, Vocab, Checkpoint, LoadTrace)> {
    let (mut ck, trace) = Checkpoint::load_filtered(manifest, probe_reads)?;
    let mut cfg = Config::default();
    let mut errors = Vec::new();
    for (k, v) in &ck.config {
        if let Err(e) = cfg.set(k, v) {
            errors.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let vocab = Vocab::from_tokens(ck.vocab.clone())?;
    let mut model = Model::new(cfg.model_config(vocab.len()), &mut stream(0, Stream::Init))?;
    model.load_tensors(std::mem::take(&mut ck.tensors), probe_reads)?;
    Ok((model, vocab, ck, trace))
}

fn encode(rows: &[LabelledText], vocab: &Vocab, max_len: usize) -> Result<Vec<(TokenSequence, usize)>> {
    rows.iter()
        .map(|r| Ok((TokenSequence::from_text(&r.text, vocab, max_len)?, r.label)))
        .collect()
}

/// Fine-tune a fresh classifier on `task` from the checkpoint at `manifest`.
pub fn fine_tune(manifest: &Path, task: &ProbeTask, opts: FineTuneOptions) -> Result<FineTuneResult> {
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::Validation("probe batch size and lr must be positive".into()));
    }
    let (model, vocab, ck, trace) = load_probe_body(manifest)?;
    let max_len = model.config().max_seq_len;
    let train = encode(&task.train, &vocab, max_len)?;
    let dev = encode(&task.dev, &vocab, max_len)?;
    let mut rng = stream(opts.seed, Stream::Probe);
    let mut clf = Classifier::new(model, task.classes, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::new(opts.lr, 0), clf.model.params());
    let trainable = clf.trainable_ids();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let seqs: Vec<&[TokenId]> = chunk.iter().map(|&i| train[i].0.ids()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let out = clf.forward(&seqs, &labels)?;
            total += out.graph.value(out.loss).item() * chunk.len() as f64;
            let mut grads = out.graph.backward(out.loss, clf.model.params())?;
            for (id, _, _) in clf.model.params().iter() {
                if !trainable.contains(&id) {
                    grads.get_mut(id).data_mut().fill(0.0);
                }
            }
            adam.step(clf.model.params_mut(), &grads)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let mut correct = 0;
    for chunk in dev.chunks(opts.batch_size.max(1)) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|(s, _)| s.ids()).collect();
        let pred = clf.predict(&seqs)?;
        correct += pred.iter().zip(chunk).filter(|(p, (_, l))| *p == l).count();
    }
    Ok(FineTuneResult {
        dev_accuracy: correct as f64 / dev.len() as f64,
        epoch_losses,
        trace,
        mode: ck.mode,
        pretrain_step: ck.step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub pretrain_step: u64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

/// Sample standard deviation (n - 1). Zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Fine-tune every checkpoint with seeds `0..seeds` using up to `jobs`
/// threads, and aggregate per checkpoint.
pub fn compare_checkpoints(manifests: &[PathBuf], task: &ProbeTask, base: FineTuneOptions, seeds: u64, jobs: usize) -> Result<Vec<ComparisonRow>> {
    if seeds == 0 {
        return Err(Error::Validation("probe_seeds must be at least 1".into()));
    }
    let work: Vec<(usize, u64)> = (0..manifests.len()).flat_map(|c| (0..seeds).map(move |s| (c, s))).collect();
    let results: Mutex<Vec<Option<Result<FineTuneResult>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, s)) = work.get(i) else { break };
                let r = fine_tune(&manifests[c], task, FineTuneOptions { seed: base.seed.wrapping_add(s), ..base });
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned lock");
    let mut rows: Vec<ComparisonRow> = Vec::with_capacity(manifests.len());
    for (i, r) in results.into_iter().enumerate() {
        let r = r.expect("every job ran")?;
        let c = work[i].0;
        if let Some(row) = rows.iter_mut().find(|row| row.checkpoint == manifests[c]) {
            row.accuracies.push(r.dev_accuracy);
        } else {
            rows.push(ComparisonRow {
                mode: r.mode,
                pretrain_step: r.pretrain_step,
                mean_acc: 0.0,
                std_acc: 0.0,
                n_seeds: 0,
                checkpoint: manifests[c].clone(),
                accuracies: vec![r.dev_accuracy],
            });
        }
    }
    for row in &mut rows {
        row.n_seeds = row.accuracies.len();
        row.mean_acc = row.accuracies.iter().sum::<f64>() / row.n_seeds as f64;
        row.std_acc = sample_std(&row.accuracies);
    }
    Ok(rows)
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests;
