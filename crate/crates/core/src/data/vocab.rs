//! Whitespace tokenizer over a closed vocabulary.
//!
//! Ids `0..N_SPECIAL` are reserved for special tokens; words follow in the
//! order they were registered.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const IMAGEPAD: TokenId = 4;
pub const TEXTPAD: TokenId = 5;
pub const BOI: TokenId = 6;
pub const EOI: TokenId = 7;
pub const N_SPECIAL: usize = 8;

pub const SPECIAL_NAMES: [&str; N_SPECIAL] =
    ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[IMAGEPAD]", "[TEXTPAD]", "[BOI]", "[EOI]"];

pub fn is_special(t: TokenId) -> bool {
    t < N_SPECIAL
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TextVocab {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            v.index.insert((*name).to_string(), i);
        }
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if v.index.contains_key(&w) {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            v.index.insert(w.clone(), N_SPECIAL + v.words.len());
            v.words.push(w);
        }
        Ok(v)
    }

    /// Number of non-special words.
    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    /// Specials plus words.
    pub fn len(&self) -> usize {
        N_SPECIAL + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        if id < N_SPECIAL {
            Some(SPECIAL_NAMES[id])
        } else {
            self.words.get(id - N_SPECIAL).map(String::as_str)
        }
    }

    pub fn encode_text(&self, s: &str) -> Result<Vec<TokenId>> {
        s.split_whitespace().map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))).collect()
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| self.token(id).ok_or(Error::Vocabulary { id, size: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TextVocab {
        TextVocab::from_words(["a", "red", "block"]).unwrap()
    }

    #[test]
    fn specials_are_distinct_low_ids() {
        let ids = [PAD, BOS, EOS, MASK, IMAGEPAD, TEXTPAD, BOI, EOI];
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), N_SPECIAL);
        assert!(ids.iter().all(|&i| i < N_SPECIAL));
        assert_eq!(vocab().id("a"), Some(N_SPECIAL));
    }

    #[test]
    fn empty_string_round_trip() {
        let v = vocab();
        assert_eq!(v.encode_text("").unwrap(), Vec::<TokenId>::new());
        assert_eq!(v.decode_text(&[]).unwrap(), "");
    }

    #[test]
    fn sentence_round_trip() {
        let v = vocab();
        let ids = v.encode_text("a red block").unwrap();
        assert_eq!(v.decode_text(&ids).unwrap(), "a red block");
    }

    #[test]
    fn unknown_word_is_named() {
        match vocab().encode_text("a blue block") {
            Err(Error::UnknownToken(w)) => assert_eq!(w, "blue"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicates_rejected() {
        assert!(TextVocab::from_words(["a", "a"]).is_err());
        assert!(TextVocab::from_words(["[MASK]"]).is_err());
    }
}
