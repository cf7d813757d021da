//! Self-contained property checks. Each suite prints measured values next to
//! their limits; the CLI `verify` subcommand and the acceptance tests both
//! run them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::error::Result;
use crate::nn::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::graph::log_softmax_rows;
use crate::nn::loss::{discriminator_loss, generator_loss};
use crate::nn::{combine_losses, Graph, Model, ModelConfig, NodeId, Tensor, TowerConfig};
use crate::probe::Classifier;
use crate::replay::ReplayBuffer;
use crate::rng::{seeded, stream, Stream};
use crate::strategies::{ExampleFeatures, LinUcbState, LsrState};
use crate::text::{assemble_corrupted, mask_sequence, CorruptedExample, MaskedExample, TokenId, TokenSequence, CLS};
use crate::trainer::Trainer;

pub const SAMPLING_WEIGHTS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
pub const SAMPLING_ALPHAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
pub const SAMPLING_TOLERANCE: f64 = 0.01;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_FLOOR: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const LINUCB_TOLERANCE: f64 = 0.05;
pub const LSR_TOLERANCE: f64 = 1e-6;
pub const DRIFT_SE_MULTIPLE: f64 = 3.0;
pub const DRIFT_GROWTH: f64 = 5.0;
/// Masks per sequence for the drift suite; more than the training default so
/// that the step-0 standard error is tight.
pub const DRIFT_EVAL_MASKS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    AtMost,
    AtLeast,
    Equal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, relation: Relation, limit: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => measured <= limit,
            Relation::AtLeast => measured >= limit,
            Relation::Equal => measured == limit,
        };
        Self {
            name: name.into(),
            measured,
            relation,
            limit,
            passed,
            detail: String::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Equal => "==",
        };
        write!(
            f,
            "{} {}: measured {:.6e} (limit {op} {:.6e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.limit
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Sampling,
    Gradients,
    Buffer,
    Drift,
    Losses,
    Strategies,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Sampling,
        Suite::Gradients,
        Suite::Buffer,
        Suite::Drift,
        Suite::Losses,
        Suite::Strategies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sampling => "sampling",
            Suite::Gradients => "gradients",
            Suite::Buffer => "buffer",
            Suite::Drift => "drift",
            Suite::Losses => "losses",
            Suite::Strategies => "strategies",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Run one suite. `cfg` supplies the seed, and for the drift suite the
/// model, corpus and step count.
pub fn run_suite(suite: Suite, cfg: &Config) -> Result<Vec<Check>> {
    match suite {
        Suite::Sampling => verify_sampling(cfg.seed, 1_000_000),
        Suite::Gradients => verify_gradients(cfg.seed),
        Suite::Buffer => {
            let mut checks = verify_complexity(cfg.seed)?;
            checks.extend(verify_eviction(cfg.seed, 10_000)?);
            Ok(checks)
        }
        Suite::Drift => verify_drift(cfg).map(|d| d.checks),
        Suite::Losses => verify_losses(),
        Suite::Strategies => verify_strategies(cfg.seed),
    }
}

/// A two-token corrupted example; buffer checks never look at its content.
pub fn placeholder_example() -> CorruptedExample {
    let seq = TokenSequence::new(vec![CLS, 4], 5).expect("valid sequence");
    CorruptedExample::from_parts(vec![CLS, 4], seq, vec![]).expect("valid example")
}

/// Empirical draw frequencies for weights [1,2,3,4] under each alpha.
pub fn verify_sampling(seed: u64, draws: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (ai, &alpha) in SAMPLING_ALPHAS.iter().enumerate() {
        let mut buf = ReplayBuffer::new(SAMPLING_WEIGHTS.len(), alpha)?;
        let mut ids = Vec::new();
        for (step, &w) in SAMPLING_WEIGHTS.iter().enumerate() {
            ids.push(buf.add(placeholder_example(), w, step as u64)?);
        }
        let z: f64 = SAMPLING_WEIGHTS.iter().map(|w| w.powf(alpha)).sum();
        let expected: Vec<f64> = SAMPLING_WEIGHTS.iter().map(|w| w.powf(alpha) / z).collect();
        let mut rng = stream(seed.wrapping_add(ai as u64), Stream::Buffer);
        let mut counts = vec![0usize; ids.len()];
        let mut left = draws;
        while left > 0 {
            let k = left.min(10_000);
            for d in buf.sample(k, &mut rng)? {
                counts[ids.iter().position(|&i| i == d.entry_id).expect("live id")] += 1;
            }
            left -= k;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        let err = freq.iter().zip(&expected).map(|(f, p)| (f - p).abs()).fold(0.0, f64::max);
        checks.push(
            Check::new(format!("sampling alpha={alpha} max |freq - P|"), err, Relation::AtMost, SAMPLING_TOLERANCE)
                .with_detail(format!("freq {freq:.4?} P {expected:.4?}")),
        );
        if alpha == 0.0 {
            let total = buf.total_priority();
            let exact = buf.tree().leaves().iter().map(|l| (l / total - 0.25).abs()).fold(0.0, f64::max);
            checks.push(Check::new("sampling alpha=0 is exactly uniform", exact, Relation::Equal, 0.0));
        }
    }
    Ok(checks)
}

/// Buffer sizes for the complexity check: powers of two from 16 to 65536
/// plus a few sizes in between.
pub fn complexity_sizes() -> Vec<usize> {
    let mut v: Vec<usize> = (4..=16).map(|p| 1usize << p).collect();
    v.extend([100, 1000, 50_000]);
    v.sort_unstable();
    v
}

pub fn expected_visits(n: usize) -> u64 {
    n.next_power_of_two().trailing_zeros() as u64 + 1
}

/// Node visits of one add (with eviction), one update and one single draw on
/// a full buffer of each size, against `ceil(log2 N) + 1`.
pub fn verify_complexity(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, Stream::Buffer);
    let mut worst = [0u64; 4];
    let mut rows = Vec::new();
    for n in complexity_sizes() {
        let mut buf = ReplayBuffer::new(n, 1.0)?;
        let mut last = 0;
        for i in 0..n {
            last = buf.add(placeholder_example(), rng.random_range(0.5..2.0), i as u64)?;
        }
        let want = expected_visits(n);
        let mut measure = |f: &mut dyn FnMut(&mut ReplayBuffer) -> Result<()>| -> Result<(u64, u64)> {
            buf.reset_visit_counters();
            f(&mut buf)?;
            Ok((buf.tree().node_visits(), buf.eviction_tree_visits()))
        };
        let (add_sum, add_min) = measure(&mut |b| b.add(placeholder_example(), 1.0, n as u64).map(|_| ()))?;
        let (upd_sum, upd_min) = measure(&mut |b| b.update(last, 3.0))?;
        let (smp_sum, smp_min) = measure(&mut |b| b.sample(1, &mut rng).map(|_| ()))?;
        let diffs = [
            add_sum.abs_diff(want),
            upd_sum.abs_diff(want),
            smp_sum.abs_diff(want),
            add_min.abs_diff(want).max(upd_min.abs_diff(want)).max(smp_min),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = (*w).max(d);
        }
        rows.push(format!("N={n}:{add_sum}/{upd_sum}/{smp_sum}/{want}"));
    }
    let names = [
        "add sum-tree visits - (ceil(log2 N)+1)",
        "update sum-tree visits - (ceil(log2 N)+1)",
        "sample sum-tree visits - (ceil(log2 N)+1)",
        "eviction-tree visits per add or update - (ceil(log2 N)+1), plus per sample",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .enumerate()
        .map(|(i, (name, w))| {
            let c = Check::new(format!("complexity max |{name}|"), w as f64, Relation::Equal, 0.0);
            if i == 0 {
                c.with_detail(format!("add/update/sample/expected {}", rows.join(" ")))
            } else {
                c
            }
        })
        .collect())
}

/// Randomized add/update sequences on a capacity-64 buffer. Every eviction
/// must remove a minimum-weight entry, the oldest among ties.
pub fn verify_eviction(seed: u64, sequences: usize) -> Result<Vec<Check>> {
    const CAP: usize = 64;
    let mut rng = stream(seed, Stream::Buffer);
    let mut over_capacity = 0usize;
    let mut wrong = 0usize;
    let mut evictions = 0usize;
    for _ in 0..sequences {
        let mut buf = ReplayBuffer::new(CAP, 1.0)?;
        let ops = rng.random_range(CAP + 16..CAP * 3);
        // Few distinct weights and coarse steps so ties are common.
        for op in 0..ops {
            let w = rng.random_range(0..6) as f64 * 0.5;
            let step = (op / 4) as u64;
            if buf.live_count() > 0 && rng.random_bool(0.3) {
                let live: Vec<_> = buf.entries().map(|e| e.entry_id).collect();
                buf.update(live[rng.random_range(0..live.len())], w)?;
                continue;
            }
            let expected = if buf.live_count() == CAP {
                buf.entries()
                    .min_by(|a, b| {
                        a.weight
                            .total_cmp(&b.weight)
                            .then(a.insert_step.cmp(&b.insert_step))
                            .then(a.entry_id.cmp(&b.entry_id))
                    })
                    .map(|e| e.entry_id)
            } else {
                None
            };
            let (_, evicted) = buf.add_with_eviction(placeholder_example(), w, step)?;
            if evicted.as_ref().map(|e| e.entry_id) != expected {
                wrong += 1;
            }
            evictions += usize::from(evicted.is_some());
            if buf.live_count() > CAP {
                over_capacity += 1;
            }
        }
    }
    Ok(vec![
        Check::new("eviction live count above capacity", over_capacity as f64, Relation::Equal, 0.0),
        Check::new("eviction not min-weight-oldest", wrong as f64, Relation::Equal, 0.0)
            .with_detail(format!("{evictions} evictions over {sequences} sequences")),
    ])
}

/// Tiny two-tower model used by the gradient and loss checks.
pub fn toy_model_config(vocab: usize) -> ModelConfig {
    let tower = TowerConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
    };
    ModelConfig {
        vocab_size: vocab,
        max_seq_len: 8,
        emb_dim: 6,
        generator: tower,
        discriminator: tower,
        ffn_mult: 2,
        init_std: 0.3,
    }
}

/// Toy model with every tensor jittered so no gradient is trivially zero.
pub fn toy_model(vocab: usize, seed: u64) -> Result<Model> {
    let mut rng = seeded(seed);
    let mut m = Model::new(toy_model_config(vocab), &mut rng)?;
    let dist = Normal::new(0.0, 0.3).expect("positive std");
    for id in m.params().ids().collect::<Vec<_>>() {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    Ok(m)
}

/// Three sequences of lengths 6, 4 and 8, masked at rate 0.3, with every
/// other masked position replaced.
pub fn toy_examples(vocab: usize, seed: u64) -> Result<(Vec<MaskedExample>, Vec<CorruptedExample>)> {
    let mut rng = seeded(seed);
    let mut masked = Vec::new();
    let mut corrupted = Vec::new();
    for n in [6usize, 4, 8] {
        let mut ids = vec![CLS];
        ids.extend((1..n).map(|_| rng.random_range(4..vocab as TokenId)));
        let seq = TokenSequence::new(ids, vocab)?;
        let m = mask_sequence(&seq, 0.3, &mut rng)?;
        let sampled: Vec<TokenId> = m
            .originals
            .iter()
            .enumerate()
            .map(|(i, &o)| if i % 2 == 0 { o } else { 4 + (o + 1 - 4) % (vocab as TokenId - 4) })
            .collect();
        corrupted.push(assemble_corrupted(&m, &sampled)?);
        masked.push(m);
    }
    Ok((masked, corrupted))
}

fn joint_loss(m: &Model, masked: &[MaskedExample], corrupted: &[CorruptedExample], gen: bool, disc: bool, lambda: f64) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let lg = if gen {
        Some(m.generator_forward(&mut g, &masked.iter().collect::<Vec<_>>())?.loss)
    } else {
        None
    };
    let ld = if disc {
        Some(m.discriminator_forward(&mut g, &corrupted.iter().collect::<Vec<_>>())?.loss)
    } else {
        None
    };
    let root = combine_losses(&mut g, lg, ld, lambda)?;
    Ok((g, root))
}

fn grad_check_entry(name: &str, r: &GradCheckReport) -> Check {
    let worst = r.worst().map(|w| w.name.clone()).unwrap_or_default();
    Check::new(format!("gradients {name} max relative error"), r.max_rel_error(), Relation::AtMost, GRADIENT_TOLERANCE)
        .with_detail(format!("{} scalars, worst {worst}", r.scalars_checked))
}

/// Central differences on L_G, lambda L_D, the combined loss and the probe
/// loss, plus the exact-zero generator gradient of L_D.
pub fn verify_gradients(seed: u64) -> Result<Vec<Check>> {
    const VOCAB: usize = 12;
    const LAMBDA: f64 = 3.0;
    let mut checks = Vec::new();
    let (masked, corrupted) = toy_examples(VOCAB, seed.wrapping_add(1))?;
    for (name, gen, disc) in [("L_G", true, false), ("lambda*L_D", false, true), ("L_G + lambda*L_D", true, true)] {
        let mut m = toy_model(VOCAB, seed)?;
        let (g, root) = joint_loss(&m, &masked, &corrupted, gen, disc, LAMBDA)?;
        let grads = g.backward(root, m.params())?;
        let ids: Vec<_> = m.params().ids().collect();
        let r = check_gradients(&mut m, &grads, &ids, GRADIENT_STEP, GRADIENT_FLOOR, |m| {
            let (g, r) = joint_loss(m, &masked, &corrupted, gen, disc, LAMBDA)?;
            Ok(g.value(r).item())
        })?;
        checks.push(grad_check_entry(name, &r));
        if !gen {
            let leaked = m
                .generator_ids()
                .into_iter()
                .flat_map(|id| grads.get(id).data().to_vec())
                .fold(0.0, |a: f64, v| a.max(v.abs()));
            checks.push(Check::new("gradients L_D w.r.t. generator parameters max |g|", leaked, Relation::Equal, 0.0));
        }
    }

    let model = toy_model(VOCAB, seed.wrapping_add(2))?;
    let mut clf = Classifier::new(model, 3, &mut seeded(seed.wrapping_add(3)))?;
    let seqs: Vec<Vec<TokenId>> = corrupted.iter().map(|c| c.original.ids().to_vec()).collect();
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let labels = [0, 2, 1];
    let out = clf.forward(&refs, &labels)?;
    let grads = out.graph.backward(out.loss, clf.model().params())?;
    let ids = clf.trainable_ids();
    let r = check_gradients(&mut clf, &grads, &ids, GRADIENT_STEP, GRADIENT_FLOOR, |c| {
        let o = c.forward(&refs, &labels)?;
        Ok(o.graph.value(o.loss).item())
    })?;
    checks.push(grad_check_entry("probe loss", &r));
    Ok(checks)
}

/// Hand-computed loss values, through both the closed-form helpers and the
/// tape.
pub fn verify_losses() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let v = 100;
    let uniform = generator_loss(&log_softmax_rows(&Tensor::zeros(&[3, v])), &[4, 50, 99])?;
    checks.push(Check::new("losses uniform MLM |L - ln V|", (uniform - (v as f64).ln()).abs(), Relation::AtMost, LOSS_TOLERANCE));

    let model = Model::new(toy_model_config(v), &mut seeded(1))?;
    let (masked, _) = toy_examples(v, 2)?;
    let mut g = Graph::new();
    let out = model.generator_forward(&mut g, &masked.iter().collect::<Vec<_>>())?;
    let tape = g.value(out.loss).item();
    checks.push(Check::new("losses fresh generator |L_G - ln V|", (tape - (v as f64).ln()).abs(), Relation::AtMost, LOSS_TOLERANCE));

    let (half, _) = discriminator_loss(&[&[0.5]], &[&[1.0]])?;
    checks.push(Check::new("losses BCE at D=0.5 |L - ln 2|", (half - std::f64::consts::LN_2).abs(), Relation::AtMost, LOSS_TOLERANCE));
    let mut g = Graph::new();
    let z = g.input(Tensor::from_vec(&[1, 1], vec![0.0])?);
    let l = g.bce_logits(z, vec![0.0], vec![1.0])?;
    checks.push(Check::new("losses tape BCE at logit 0 |L - ln 2|", (g.value(l).item() - std::f64::consts::LN_2).abs(), Relation::AtMost, LOSS_TOLERANCE));

    // D = (0.9, 0.2) against labels (original, replaced).
    let expected = 0.164_252_033_486_018;
    let (two, _) = discriminator_loss(&[&[0.9, 0.2]], &[&[1.0, 0.0]])?;
    checks.push(Check::new("losses two-position BCE |L - 0.16425|", (two - expected).abs(), Relation::AtMost, LOSS_TOLERANCE));
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut g = Graph::new();
    let z = g.input(Tensor::from_vec(&[2, 1], vec![logit(0.9), logit(0.2)])?);
    let l = g.bce_logits(z, vec![1.0, 0.0], vec![0.5, 0.5])?;
    checks.push(Check::new("losses tape two-position BCE |L - 0.16425|", (g.value(l).item() - expected).abs(), Relation::AtMost, LOSS_TOLERANCE));
    Ok(checks)
}

/// LinUCB recovery of a planted linear reward and the LSR normal-equation
/// residual.
pub fn verify_strategies(seed: u64) -> Result<Vec<Check>> {
    let truth = [0.8, -0.3, 0.5];
    let noise = Normal::new(0.0, 0.01).expect("positive std");
    let mut rng = seeded(seed);
    let mut ucb = LinUcbState::new(truth.len());
    for _ in 0..100 {
        let x: Vec<f64> = (0..truth.len()).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let r = truth.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + noise.sample(&mut rng);
        ucb.observe(&ExampleFeatures(x), r)?;
    }
    let theta = ucb.theta();
    let err = theta.iter().zip(truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let d = 6;
    let ridge = 0.5;
    let entries: Vec<(ExampleFeatures, f64)> = (0..80)
        .map(|_| (ExampleFeatures((0..d).map(|_| rng.random::<f64>()).collect()), rng.random::<f64>() * 2.0))
        .collect();
    let fit = LsrState::fit(&entries, ridge, 0)?;
    // (X^T X + ridge I) theta - X^T r, computed without nalgebra.
    let mut resid = vec![0.0; d];
    let mut rhs = vec![0.0; d];
    for (x, r) in &entries {
        let pred: f64 = x.0.iter().zip(fit.theta.iter()).map(|(a, b)| a * b).sum();
        for i in 0..d {
            resid[i] += x.0[i] * pred;
            rhs[i] += x.0[i] * r;
        }
    }
    for i in 0..d {
        resid[i] += ridge * fit.theta[i] - rhs[i];
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel = norm(&resid) / norm(&rhs);
    Ok(vec![
        Check::new("strategies LinUCB planted reward max-norm error", err, Relation::AtMost, LINUCB_TOLERANCE)
            .with_detail(format!("theta {:.4?}", theta.as_slice())),
        Check::new("strategies LSR normal-equation relative residual", rel, Relation::AtMost, LSR_TOLERANCE),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub vocab_size: usize,
    pub steps: u64,
    pub start: crate::trainer::DriftResult,
    pub end: crate::trainer::DriftResult,
    pub checks: Vec<Check>,
}

/// Train for `cfg.steps` and compare exact recovery at the start and end.
pub fn verify_drift(cfg: &Config) -> Result<DriftReport> {
    let mut cfg = cfg.clone();
    cfg.drift_eval_masks = cfg.drift_eval_masks.max(DRIFT_EVAL_MASKS);
    // Drift is measured here, not inside the loop.
    cfg.eval_every = u64::MAX;
    let mut t = Trainer::new(&cfg)?;
    let v = t.vocab().len();
    let start = t.drift()?;
    for _ in 0..cfg.steps {
        t.step()?;
    }
    let end = t.drift()?;
    let chance = 1.0 / v as f64;
    let z = (start.exact_recovery - chance).abs() / start.std_error.max(f64::MIN_POSITIVE);
    let growth = end.exact_recovery / start.exact_recovery.max(f64::MIN_POSITIVE);
    let checks = vec![
        Check::new("drift step-0 |recovery - 1/V| in standard errors", z, Relation::AtMost, DRIFT_SE_MULTIPLE).with_detail(format!(
            "recovery {:.5} 1/V {chance:.5} se {:.5} positions {}",
            start.exact_recovery, start.std_error, start.positions
        )),
        Check::new(format!("drift recovery growth after {} steps", cfg.steps), growth, Relation::AtLeast, DRIFT_GROWTH)
            .with_detail(format!("start {:.5} end {:.5}", start.exact_recovery, end.exact_recovery)),
    ];
    Ok(DriftReport {
        vocab_size: v,
        steps: cfg.steps,
        start,
        end,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_parse_by_name() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn check_relations() {
        assert!(Check::new("a", 1.0, Relation::AtMost, 1.0).passed);
        assert!(!Check::new("a", 1.1, Relation::AtMost, 1.0).passed);
        assert!(Check::new("a", 5.0, Relation::AtLeast, 5.0).passed);
        assert!(!Check::new("a", f64::NAN, Relation::AtLeast, 5.0).passed);
        assert!(!Check::new("a", 1e-300, Relation::Equal, 0.0).passed);
        assert!(Check::new("a", 0.0, Relation::Equal, 0.0).to_string().starts_with("PASS a"));
    }

    #[test]
    fn expected_visits_values() {
        assert_eq!(expected_visits(16), 5);
        assert_eq!(expected_visits(17), 6);
        assert_eq!(expected_visits(65536), 17);
    }

    #[test]
    fn small_suites_pass() {
        for c in verify_sampling(3, 200_000).unwrap() {
            assert!(c.passed, "{c}");
        }
        for c in verify_eviction(3, 200).unwrap() {
            assert!(c.passed, "{c}");
        }
        for c in verify_losses().unwrap().into_iter().chain(verify_strategies(0).unwrap()) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn eviction_check_catches_a_wrong_oracle() {
        // A buffer with a single distinct weight evicts strictly by age.
        let mut b = ReplayBuffer::new(2, 1.0).unwrap();
        let first = b.add(placeholder_example(), 1.0, 0).unwrap();
        b.add(placeholder_example(), 1.0, 0).unwrap();
        let (_, ev) = b.add_with_eviction(placeholder_example(), 1.0, 1).unwrap();
        assert_eq!(ev.unwrap().entry_id, first);
    }
}
