//! Character-level corpus handling.

use std::path::Path;

use lmn_tensor::Rng;

use crate::error::{LmnError, Result};

/// Characters of a corpus sorted by code point; the id of a character is
/// its index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(LmnError::Data("empty corpus".into()));
        }
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Vocab { chars })
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if chars.is_empty() || sorted != chars {
            return Err(LmnError::Data("vocabulary must be non-empty, unique and sorted".into()));
        }
        Ok(Vocab { chars })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    /// Fails on the first character outside the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| LmnError::Data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.chars.get(i).copied().ok_or(LmnError::InvalidToken {
                    token: i,
                    vocab: self.len(),
                })
            })
            .collect()
    }

    /// Sidecar format: one character per line as its code point in hex,
    /// so that newlines and spaces survive.
    pub fn to_sidecar(&self) -> String {
        self.chars.iter().map(|&c| format!("{:x}\n", c as u32)).collect()
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let chars = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                u32::from_str_radix(l.trim(), 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| LmnError::Data(format!("bad vocabulary line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Vocab::from_chars(chars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sidecar()).map_err(|e| LmnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LmnError::io(path, e))?;
        Vocab::from_sidecar(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub ids: Vec<usize>,
    /// First index of the validation part.
    pub split_at: usize,
}

impl Dataset {
    /// 90/10 train/validation split.
    pub fn from_text(text: &str) -> Result<Self> {
        Dataset::with_split(text, 0.9)
    }

    pub fn with_split(text: &str, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(LmnError::Data(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let vocab = Vocab::build(text)?;
        let ids = vocab.encode(text)?;
        let split_at = (ids.len() as f64 * train_fraction) as usize;
        Ok(Dataset { vocab, ids, split_at })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LmnError::io(path, e))?;
        Dataset::from_text(&text)
    }

    pub fn part(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.ids[..self.split_at],
            Split::Val => &self.ids[self.split_at..],
        }
    }

    /// `batch` windows at uniform offsets in `[0, len − block − 1]`.
    /// Returns flattened `(inputs, targets)`, each `batch · block` long,
    /// with targets shifted one position right.
    pub fn sample_batch(&self, split: Split, batch: usize, block: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
        let data = self.part(split);
        if data.len() < block + 1 {
            return Err(LmnError::Data(format!(
                "{split:?} split has {} tokens, need at least block_size + 1 = {}",
                data.len(),
                block + 1
            )));
        }
        let mut x = Vec::with_capacity(batch * block);
        let mut y = Vec::with_capacity(batch * block);
        for _ in 0..batch {
            let off = rng.below(data.len() - block);
            x.extend_from_slice(&data[off..off + block]);
            y.extend_from_slice(&data[off + 1..off + block + 1]);
        }
        Ok((x, y))
    }
}
