use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Word-level vocabulary. Ids 0..4 are the reserved specials in the order
/// `[CLS] [SEP] [MASK] [UNK]`; the remaining ids follow insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[MASK]", "[UNK]"];

impl Vocab {
    /// Builds a vocabulary from words (lowercased, duplicates ignored).
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid vocabulary entry {w:?}")));
            }
            if !v.index.contains_key(&w) {
                v.push(w);
            }
        }
        Ok(v)
    }

    fn push(&mut self, w: String) {
        self.index.insert(w.clone(), self.tokens.len() as u32);
        self.tokens.push(w);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `word` after lowercasing, or `[UNK]`.
    pub fn id(&self, word: &str) -> u32 {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }

    /// Id of `word`, failing instead of mapping to `[UNK]`.
    pub fn strict_id(&self, word: &str) -> Result<u32> {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown word {word:?}")))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization with lowercasing.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Structural specials are never masked or sampled as replacements.
    pub fn is_special(id: u32) -> bool {
        id == CLS || id == SEP || id == MASK
    }

    /// Ids eligible as random replacement tokens during masking.
    pub fn word_ids(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.tokens.len() as u32
    }

    pub fn check_id(&self, id: u32) -> Result<()> {
        if (id as usize) < self.tokens.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary(format!(
                "token id {id} out of range for vocabulary of {}",
                self.tokens.len()
            )))
        }
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data {
                path: path.into(),
                detail: "vocabulary must start with the special tokens".into(),
            });
        }
        let v = Vocab::new(&lines[SPECIALS.len()..])?;
        if v.len() != lines.len() {
            return Err(Error::Data {
                path: path.into(),
                detail: "duplicate vocabulary entries".into(),
            });
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_lookup_lowercases() {
        let v = Vocab::new(["Red", "ball", "red"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(CLS), Some("[CLS]"));
        assert_eq!(v.id("RED"), 4);
        assert_eq!(v.encode("the red  Ball"), vec![UNK, 4, 5]);
        assert!(v.strict_id("the").is_err());
        assert_eq!(v.word_ids(), 4..6);
    }

    #[test]
    fn rejects_whitespace_entries() {
        assert!(Vocab::new(["two words"]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::new(["dog", "cat"]).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        fs::write(&path, "dog\ncat\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }
}
