//! Token vocabulary with a reserved mask sentinel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier. Real tokens occupy `0..size`; the mask sentinel is `size`.
pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary must hold at least 2 tokens, got {0}")]
    TooSmall(u32),
    #[error("eos id {eos} outside vocabulary of size {size}")]
    EosOutOfRange { eos: TokenId, size: u32 },
    #[error("unk id {unk} outside vocabulary of size {size}")]
    UnkOutOfRange { unk: TokenId, size: u32 },
    #[error("token text table has {got} entries, expected {expected}")]
    TextTableLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
    eos_id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unk_id: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_text: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: u32, eos_id: TokenId) -> Result<Self, VocabError> {
        if size < 2 {
            return Err(VocabError::TooSmall(size));
        }
        if eos_id >= size {
            return Err(VocabError::EosOutOfRange { eos: eos_id, size });
        }
        Ok(Self {
            size,
            eos_id,
            unk_id: None,
            token_text: None,
        })
    }

    /// Attach display strings, one per real token id.
    pub fn with_text(mut self, text: Vec<String>) -> Result<Self, VocabError> {
        if text.len() != self.size as usize {
            return Err(VocabError::TextTableLength {
                got: text.len(),
                expected: self.size as usize,
            });
        }
        self.token_text = Some(text);
        Ok(self)
    }

    pub fn with_unk(mut self, unk: TokenId) -> Result<Self, VocabError> {
        if unk >= self.size {
            return Err(VocabError::UnkOutOfRange {
                unk,
                size: self.size,
            });
        }
        self.unk_id = Some(unk);
        Ok(self)
    }

    /// Number of real (generable) tokens.
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk_id
    }

    /// The mask sentinel, one past the last real token.
    pub fn mask_id(&self) -> TokenId {
        self.size
    }

    pub fn is_real(&self, token: TokenId) -> bool {
        token < self.size
    }

    pub fn text(&self, token: TokenId) -> Option<&str> {
        self.token_text
            .as_ref()
            .and_then(|t| t.get(token as usize))
            .map(String::as_str)
    }

    pub fn token_text(&self) -> Option<&[String]> {
        self.token_text.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_sits_one_past_real_tokens() {
        let v = Vocabulary::new(5, 4).unwrap();
        assert_eq!(v.mask_id(), 5);
        assert!(!v.is_real(v.mask_id()));
        assert!(v.is_real(v.eos_id()));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(Vocabulary::new(1, 0), Err(VocabError::TooSmall(1)));
        assert!(matches!(
            Vocabulary::new(3, 3),
            Err(VocabError::EosOutOfRange { .. })
        ));
        assert!(Vocabulary::new(3, 2)
            .unwrap()
            .with_text(vec!["a".into()])
            .is_err());
    }
}
