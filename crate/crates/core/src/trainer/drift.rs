use serde::Serialize;

use crate::error::Result;
use crate::nn::{sample_replacements, Graph, Model};
use crate::rng::{stream, Stream};
use crate::text::{mask_sequence, MaskedExample, TokenId, TokenSequence};

const EVAL_CHUNK: usize = 64;
const SAMPLING_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftResult {
    pub exact_recovery: f64,
    pub positions: usize,
    /// Binomial standard error of `exact_recovery`.
    pub std_error: f64,
}

/// `masks_per_sequence` fixed masks of every sequence, drawn from the eval stream.
pub fn drift_eval_set(seqs: &[TokenSequence], masks_per_sequence: usize, mask_rate: f64, seed: u64) -> Result<Vec<MaskedExample>> {
    let mut rng = stream(seed, Stream::Eval);
    let mut out = Vec::with_capacity(seqs.len() * masks_per_sequence);
    for s in seqs {
        for _ in 0..masks_per_sequence {
            out.push(mask_sequence(s, mask_rate, &mut rng)?);
        }
    }
    Ok(out)
}

/// Number of sampled tokens equal to their target.
pub fn exact_matches(sampled: &[TokenId], targets: &[usize]) -> usize {
    sampled.iter().zip(targets).filter(|(s, t)| **s as usize == **t).count()
}

/// Fraction of masked positions where a generator sample equals the original
/// token. Each call reseeds its sampler, so the value depends only on the
/// model and the eval set.
pub fn drift_metric(model: &Model, eval: &[MaskedExample], seed: u64, draws: usize) -> Result<DriftResult> {
    let mut rng = stream(seed ^ SAMPLING_SALT, Stream::Eval);
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in eval.chunks(EVAL_CHUNK) {
        let refs: Vec<&MaskedExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let out = model.generator_forward(&mut g, &refs)?;
        let lp = g.log_probs(out.loss).expect("generator loss node");
        for _ in 0..draws {
            let sampled = sample_replacements(lp, &mut rng)?;
            hits += exact_matches(&sampled, &out.targets);
            total += sampled.len();
        }
    }
    let p = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok(DriftResult {
        exact_recovery: p,
        positions: total,
        std_error: if total == 0 { 0.0 } else { (p * (1.0 - p) / total as f64).sqrt() },
    })
}
