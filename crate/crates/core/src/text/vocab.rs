use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"];

/// Whitespace tokenizer with lowercasing.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Most frequent `max_vocab - 4` tokens after the reserved ids.
    /// Frequency ties break lexicographically.
    pub fn build(text: &str, max_vocab: usize) -> Result<Self> {
        if max_vocab < 5 {
            return Err(Error::Validation(format!(
                "max_vocab must be at least 5, got {max_vocab}"
            )));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for tok in tokenize(text) {
            *freq.entry(tok).or_default() += 1;
        }
        for r in RESERVED {
            freq.remove(&r.to_lowercase());
        }
        if freq.is_empty() {
            return Err(Error::Validation("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_vocab - RESERVED.len());
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t))
                .collect(),
        )
    }

    pub fn build_from_file(path: &Path, max_vocab: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::build(&text, max_vocab)
    }

    /// Tokens in id order; the first four must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 || tokens[..4] != RESERVED {
            return Err(Error::Validation(
                "vocabulary must start with the four reserved tokens and hold at least one word"
                    .into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).map(|t| self.id(&t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` per line.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(id, t)| format!("{t}\t{id}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::Validation(format!("vocab line {}: expected token<TAB>id", lineno + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::Validation(format!("vocab line {}: bad id {id:?}", lineno + 1))
            })?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Validation("vocab ids must be contiguous from 0".into()));
        }
        Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = Vocab::build("a a b", 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(&v.tokens()[..4], &RESERVED);
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn ties_break_lexicographically_and_truncate() {
        let v = Vocab::build("c b a c b a d", 6).unwrap();
        assert_eq!(v.tokens()[4..], ["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("d"), UNK);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocab::build("a a b", 6).unwrap();
        assert_eq!(v.encode("a zebra"), vec![4, UNK]);
    }

    #[test]
    fn deterministic_rebuild() {
        let text = "the cat saw the dog and the bird saw a cat";
        assert_eq!(Vocab::build(text, 32).unwrap(), Vocab::build(text, 32).unwrap());
    }

    #[test]
    fn round_trip_text() {
        let v = Vocab::build("The  cat\tsat on the mat", 32).unwrap();
        assert_eq!(v.decode(&v.encode("the cat   sat on THE mat")), "the cat sat on the mat");
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocab::build("x y y z z z", 16).unwrap();
        assert_eq!(Vocab::from_tsv(&v.to_tsv()).unwrap(), v);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocab::build("   \n ", 10).is_err());
        assert!(Vocab::build("a", 4).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Vocab::build_from_file(Path::new("/nonexistent/corpus.txt"), 10).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
