//! Token alphabet and token sequences.
//!
//! Id layout: `0` is EOS, `1..=V-2` are content tokens and `V-1` is BOS. BOS
//! only ever feeds a decoder; it is never emitted, so every output
//! distribution ranges over the `V-1` ids below it and an output logit vector
//! indexes tokens directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

pub const EOS: Token = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(Error::Contract(format!("vocabulary needs at least 3 ids (BOS, EOS, one content token), got {size}")));
        }
        Ok(Vocab { size })
    }

    pub fn size(self) -> usize {
        self.size
    }

    pub fn eos(self) -> Token {
        EOS
    }

    pub fn bos(self) -> Token {
        (self.size - 1) as Token
    }

    /// Number of ids an output distribution ranges over (everything but BOS).
    pub fn emit_size(self) -> usize {
        self.size - 1
    }

    pub fn num_content(self) -> usize {
        self.size - 2
    }

    pub fn content_tokens(self) -> impl Iterator<Item = Token> {
        1..=(self.size as Token - 2)
    }

    pub fn is_content(self, t: Token) -> bool {
        t >= 1 && (t as usize) <= self.size - 2
    }
}

/// A token sequence that either ends with exactly one EOS or was cut off at
/// the maximum length without one.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(ids: Vec<Token>) -> Self {
        TokenSeq(ids)
    }

    /// Content tokens followed by EOS.
    pub fn terminated(content: &[Token]) -> Self {
        let mut ids = content.to_vec();
        ids.push(EOS);
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// The sequence without its trailing EOS.
    pub fn content(&self) -> &[Token] {
        if self.is_terminated() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }

    /// Checks ids against `vocab` and the termination rule. An unterminated
    /// sequence is valid only when `t_max` is given and it has exactly that
    /// length.
    pub fn validate(&self, vocab: Vocab, t_max: Option<usize>) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let last = self.0.len() - 1;
        for (i, &t) in self.0.iter().enumerate() {
            if t as usize >= vocab.size() {
                return Err(Error::Contract(format!("token id {t} at position {i} is outside vocabulary of size {}", vocab.size())));
            }
            if t == vocab.bos() {
                return Err(Error::Contract(format!("BOS at position {i}")));
            }
            if t == EOS && i != last {
                return Err(Error::Contract(format!("EOS at non-final position {i}")));
            }
        }
        if let Some(t_max) = t_max {
            if self.0.len() > t_max {
                return Err(Error::Contract(format!("sequence length {} exceeds maximum {t_max}", self.0.len())));
            }
        }
        if !self.is_terminated() && t_max != Some(self.0.len()) {
            return Err(Error::Contract(format!("unterminated sequence of length {} (maximum {t_max:?})", self.0.len())));
        }
        Ok(())
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(ids: Vec<Token>) -> Self {
        TokenSeq(ids)
    }
}
