//! Whitespace toy tokenizer and token sequences.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BEGIN: &str = "<bos>";
pub const END: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Dense token table. Ids `0..3` are the begin, end and pad specials; every
/// other entry is a whitespace-free word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    id_to_text: Vec<String>,
    text_to_id: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        let specials = [BEGIN, END, PAD];
        if repr.tokens.len() < 3 || repr.tokens[..3] != specials {
            return Err(Error::contract("vocabulary must start with <bos> <eos> <pad>"));
        }
        Vocabulary::from_words(repr.tokens[3..].iter().cloned())
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr { tokens: v.id_to_text }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from words in first-seen order. Duplicates are
    /// merged; words containing whitespace are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_text: Vec<String> = vec![BEGIN.into(), END.into(), PAD.into()];
        let mut text_to_id: HashMap<String, TokenId> = id_to_text
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary word {w:?}")));
            }
            if !text_to_id.contains_key(&w) {
                text_to_id.insert(w.clone(), id_to_text.len());
                id_to_text.push(w);
            }
        }
        Ok(Self {
            id_to_text,
            text_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_text.len()
    }

    pub fn begin(&self) -> TokenId {
        0
    }

    pub fn end(&self) -> TokenId {
        1
    }

    pub fn pad(&self) -> TokenId {
        2
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < 3
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.text_to_id.get(word).copied()
    }

    pub fn text(&self, id: TokenId) -> Option<&str> {
        self.id_to_text.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_text
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.text(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids bound to the vocabulary that produced them.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    vocab: Arc<Vocabulary>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab: Arc<Vocabulary>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.size()) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(Self { ids, vocab })
    }

    pub fn encode(text: &str, vocab: Arc<Vocabulary>) -> Result<Self> {
        let ids = vocab.encode(text)?;
        Ok(Self { ids, vocab })
    }

    /// A target answer must be non-empty.
    pub fn answer(text: &str, vocab: Arc<Vocabulary>) -> Result<Self> {
        let seq = Self::encode(text, vocab)?;
        if seq.is_empty() {
            return Err(Error::contract("target answer must contain at least one token"));
        }
        Ok(seq)
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

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn text(&self) -> String {
        self.vocab.decode(&self.ids)
    }

    /// `y_<i` for zero-based `i`.
    pub fn prefix(&self, i: usize) -> TokenSequence {
        TokenSequence {
            ids: self.ids[..i].to_vec(),
            vocab: Arc::clone(&self.vocab),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["Who", "is", "this", "?", "Ada", "Lovel"]).unwrap()
    }

    #[test]
    fn specials_come_first_and_ids_are_dense() {
        let v = vocab();
        assert_eq!(v.size(), 9);
        assert_eq!(v.text(v.end()), Some(END));
        for id in 0..v.size() {
            assert_eq!(v.id(v.text(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn unknown_words_are_rejected() {
        assert!(matches!(vocab().encode("Who is Bob"), Err(Error::UnknownToken(w)) if w == "Bob"));
    }

    #[test]
    fn token_sequence_checks_range_and_emptiness() {
        let v = Arc::new(vocab());
        assert!(TokenSequence::new(vec![100], Arc::clone(&v)).is_err());
        assert!(TokenSequence::answer("", Arc::clone(&v)).is_err());
        let y = TokenSequence::answer("Ada Lovel", v).unwrap();
        assert_eq!(y.prefix(1).text(), "Ada");
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn decode_encode_round_trips(picks in proptest::collection::vec(3usize..9, 1..8)) {
            let v = vocab();
            let text = v.decode(&picks);
            prop_assert_eq!(v.encode(&text).unwrap(), picks);
        }
    }
}
