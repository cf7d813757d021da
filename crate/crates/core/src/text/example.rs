use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, CLS, MASK, PAD};
use crate::error::{Error, Result};

/// An original token sequence. Position 0 always holds CLS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Validation("sequence must start with CLS".into()));
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id as usize >= vocab_size || id == MASK || id == PAD)
        {
            return Err(Error::Validation(format!(
                "token id {bad} not allowed in an original sequence"
            )));
        }
        Ok(Self { ids })
    }

    /// CLS followed by the encoded words, truncated to `max_len`.
    pub fn from_text(text: &str, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let mut ids = vec![CLS];
        ids.extend(vocab.encode(text).into_iter().take(max_len.saturating_sub(1)));
        Self::new(ids, vocab.len())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Split each corpus line into windows of `max_len - 1` words, each prefixed
/// with CLS. Lines without words are skipped.
pub fn sequences_from_corpus(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSequence>> {
    if max_len < 2 {
        return Err(Error::Validation("max_seq_len must be at least 2".into()));
    }
    let mut out = Vec::new();
    for line in text.lines() {
        let ids = vocab.encode(line);
        for window in ids.chunks(max_len - 1) {
            let mut seq = Vec::with_capacity(window.len() + 1);
            seq.push(CLS);
            seq.extend_from_slice(window);
            out.push(TokenSequence::new(seq, vocab.len())?);
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("corpus produced no sequences".into()));
    }
    Ok(out)
}

/// Generator input: the original with a set of positions replaced by MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
    pub originals: Vec<TokenId>,
    pub original: TokenSequence,
}

pub fn mask_count(len: usize, mask_rate: f64) -> usize {
    ((mask_rate * (len - 1) as f64).round() as usize).clamp(1, len - 1)
}

pub fn mask_sequence<R: Rng + ?Sized>(seq: &TokenSequence, mask_rate: f64, rng: &mut R) -> Result<MaskedExample> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::Validation("cannot mask a sequence without content".into()));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Validation(format!("mask_rate must be in (0,1), got {mask_rate}")));
    }
    let r = mask_count(n, mask_rate);
    let mut positions: Vec<usize> = index::sample(rng, n - 1, r).into_iter().map(|i| i + 1).collect();
    positions.sort_unstable();
    let mut input = seq.ids().to_vec();
    let originals = positions.iter().map(|&p| input[p]).collect();
    for &p in &positions {
        input[p] = MASK;
    }
    Ok(MaskedExample {
        input,
        mask_positions: positions,
        originals,
        original: seq.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Original,
    Replaced,
}

impl Label {
    /// Target for the "is original" probability.
    pub fn target(self) -> f64 {
        match self {
            Label::Original => 1.0,
            Label::Replaced => 0.0,
        }
    }
}

pub fn label_tokens(tokens: &[TokenId], original: &[TokenId]) -> Vec<Label> {
    tokens
        .iter()
        .zip(original)
        .map(|(a, b)| if a == b { Label::Original } else { Label::Replaced })
        .collect()
}

/// Discriminator input with per-token original/replaced labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedExample {
    pub tokens: Vec<TokenId>,
    pub original: TokenSequence,
    pub labels: Vec<Label>,
    pub mask_positions: Vec<usize>,
}

impl CorruptedExample {
    /// Rebuild from stored tokens, recomputing labels.
    pub fn from_parts(tokens: Vec<TokenId>, original: TokenSequence, mask_positions: Vec<usize>) -> Result<Self> {
        if tokens.len() != original.len() {
            return Err(Error::Shape(format!(
                "corrupted length {} != original length {}",
                tokens.len(),
                original.len()
            )));
        }
        if mask_positions.iter().any(|&p| p == 0 || p >= tokens.len()) {
            return Err(Error::Validation("mask position out of range".into()));
        }
        let labels = label_tokens(&tokens, original.ids());
        Ok(Self {
            tokens,
            original,
            labels,
            mask_positions,
        })
    }

    pub fn labels_consistent(&self) -> bool {
        self.labels == label_tokens(&self.tokens, self.original.ids())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn assemble_corrupted(m: &MaskedExample, sampled: &[TokenId]) -> Result<CorruptedExample> {
    if sampled.len() != m.mask_positions.len() {
        return Err(Error::Shape(format!(
            "{} sampled tokens for {} masked positions",
            sampled.len(),
            m.mask_positions.len()
        )));
    }
    let mut tokens = m.original.ids().to_vec();
    for (&p, &tok) in m.mask_positions.iter().zip(sampled) {
        tokens[p] = tok;
    }
    CorruptedExample::from_parts(tokens, m.original.clone(), m.mask_positions.clone())
}

/// Fraction of masked positions whose sampled token differs from the original.
pub fn replaced_fraction(ex: &CorruptedExample) -> f64 {
    if ex.mask_positions.is_empty() {
        return 0.0;
    }
    let replaced = ex
        .mask_positions
        .iter()
        .filter(|&&p| ex.labels[p] == Label::Replaced)
        .count();
    replaced as f64 / ex.mask_positions.len() as f64
}
