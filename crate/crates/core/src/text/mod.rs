//! Corpus loading, vocabulary, masking and corrupted-example assembly.

mod example;
mod vocab;

pub use example::{
    assemble_corrupted, label_tokens, mask_count, mask_sequence, replaced_fraction,
    sequences_from_corpus, CorruptedExample, Label, MaskedExample, TokenSequence,
};
pub use vocab::{tokenize, TokenId, Vocab, CLS, MASK, PAD, UNK};

/// The bundled 50-sentence corpus used by default and by the test suites.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus50.txt");
