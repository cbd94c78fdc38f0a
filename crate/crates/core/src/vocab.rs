//! Character vocabulary shared by the acoustic model, the decoder and the metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of the CTC blank symbol. Always zero.
pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate vocabulary symbol {0:?}")]
    Duplicate(char),
    #[error("vocabulary must contain the space symbol")]
    MissingSpace,
    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),
}

/// Ordered output alphabet. Index 0 is the blank, indices `1..` map to
/// the characters in the order they were given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct Vocabulary {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self, VocabError> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + 1).is_some() {
                return Err(VocabError::Duplicate(c));
            }
        }
        if !index.contains_key(&' ') {
            return Err(VocabError::MissingSpace);
        }
        Ok(Self { chars, index })
    }

    /// Number of output classes including the blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    /// Non-blank characters in index order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Character for a non-blank index; `None` for the blank or out of range.
    pub fn char_at(&self, idx: usize) -> Option<char> {
        if idx == BLANK {
            None
        } else {
            self.chars.get(idx - 1).copied()
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(VocabError::OutOfVocabulary(c)))
            .collect()
    }

    /// Maps indices to text, skipping blanks and unknown indices.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.char_at(i)).collect()
    }

    pub fn check_text(&self, text: &str) -> Result<(), VocabError> {
        match text.chars().find(|c| !self.index.contains_key(c)) {
            Some(c) => Err(VocabError::OutOfVocabulary(c)),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<char>> for Vocabulary {
    type Error = VocabError;

    fn try_from(chars: Vec<char>) -> Result<Self, Self::Error> {
        Self::new(chars)
    }
}

impl From<Vocabulary> for Vec<char> {
    fn from(v: Vocabulary) -> Self {
        v.chars
    }
}
