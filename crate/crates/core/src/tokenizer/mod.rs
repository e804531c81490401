//! Amplitude-to-token conversion.
//!
//! Token ID layout for `V` quantization levels (total `2V + 6`):
//!
//! | IDs                 | tokens                          |
//! |---------------------|---------------------------------|
//! | 0..=3               | `[CLS]` `[SEP]` `[MASK]` `[PAD]` |
//! | 4..4+V              | `signal_0` .. `signal_{V-1}`     |
//! | 4+V, 5+V            | `afib_0`, `afib_1`               |
//! | 6+V..6+2V           | `augsig_0` .. `augsig_{V-1}`     |

mod container;
mod quantize;
mod sequence;

pub use container::{read_dataset, write_dataset, TokenDataset};
pub use quantize::{detokenize, detokenize_ids, quantize_levels, segment_range};
pub use sequence::{apply_mask, tokenize_segment, MaskPlan, TokenSequence, STANDARD_MASK_RATE};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const MASK: TokenId = 2;
pub const PAD: TokenId = 3;
const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]"];

pub const DEFAULT_LEVELS: usize = 250;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("position {position}: token {id} is not a signal token")]
    NotSignal { position: usize, id: TokenId },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("malformed token dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Bijective token-string <-> ID mapping.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    levels: usize,
    names: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.levels == other.levels
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyJson {
    levels: usize,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build(levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(TokenizerError::InvalidArgument(format!(
                "need at least 2 quantization levels, got {levels}"
            )));
        }
        let mut names: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        names.extend((0..levels).map(|q| format!("signal_{q}")));
        names.extend((0..2).map(|a| format!("afib_{a}")));
        names.extend((0..levels).map(|q| format!("augsig_{q}")));
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as TokenId))
            .collect();
        Ok(Self {
            levels,
            names,
            index,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn string_of(&self, id: TokenId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    #[inline]
    pub fn signal_id(&self, level: u32) -> TokenId {
        debug_assert!((level as usize) < self.levels);
        4 + level
    }

    #[inline]
    pub fn afib_id(&self, class: u8) -> TokenId {
        debug_assert!(class < 2);
        4 + self.levels as TokenId + class as TokenId
    }

    #[inline]
    pub fn augsig_id(&self, level: u32) -> TokenId {
        debug_assert!((level as usize) < self.levels);
        6 + self.levels as TokenId + level
    }

    /// Quantization level of a `signal_*` token.
    #[inline]
    pub fn level_of(&self, id: TokenId) -> Option<u32> {
        let v = self.levels as TokenId;
        (4..4 + v).contains(&id).then(|| id - 4)
    }

    pub fn aug_level_of(&self, id: TokenId) -> Option<u32> {
        let v = self.levels as TokenId;
        (6 + v..6 + 2 * v).contains(&id).then(|| id - 6 - v)
    }

    pub fn afib_class_of(&self, id: TokenId) -> Option<u8> {
        let v = self.levels as TokenId;
        (4 + v..6 + v).contains(&id).then(|| (id - 4 - v) as u8)
    }

    /// Contiguous ID range of the signal tokens.
    pub fn signal_ids(&self) -> std::ops::Range<usize> {
        4..4 + self.levels
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabularyJson {
            levels: self.levels,
            tokens: self.names.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: VocabularyJson = serde_json::from_str(text)?;
        let vocab = Self::build(raw.levels)?;
        if raw.tokens != vocab.names {
            return Err(TokenizerError::Format(
                "vocabulary sidecar does not match the canonical layout".into(),
            ));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(Vocabulary::build(250).unwrap().size(), 506);
        assert_eq!(Vocabulary::build(2).unwrap().size(), 10);
        assert!(Vocabulary::build(1).is_err());
    }

    #[test]
    fn layout() {
        let v = Vocabulary::build(250).unwrap();
        assert_eq!(v.id_of("[CLS]"), Some(CLS));
        assert_eq!(v.id_of("[PAD]"), Some(PAD));
        assert_eq!(v.id_of("signal_0"), Some(4));
        assert_eq!(v.id_of("signal_249"), Some(253));
        assert_eq!(v.id_of("afib_0"), Some(254));
        assert_eq!(v.id_of("afib_1"), Some(255));
        assert_eq!(v.id_of("augsig_0"), Some(256));
        assert_eq!(v.id_of("augsig_249"), Some(505));
        assert_eq!(v.level_of(v.signal_id(17)), Some(17));
        assert_eq!(v.aug_level_of(v.augsig_id(17)), Some(17));
        assert_eq!(v.afib_class_of(v.afib_id(1)), Some(1));
        assert_eq!(v.level_of(v.afib_id(0)), None);
        assert_eq!(v.id_of("signal_250"), None);
    }

    #[test]
    fn bijection() {
        for levels in [2, 3, 50, 250] {
            let v = Vocabulary::build(levels).unwrap();
            for id in 0..v.size() as TokenId {
                let s = v.string_of(id).unwrap();
                assert_eq!(v.id_of(s), Some(id));
                assert_eq!(v.string_of(v.id_of(s).unwrap()), Some(s));
            }
        }
    }

    #[test]
    fn json_sidecar() {
        let v = Vocabulary::build(7).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.size(), v.size());
        let tampered = v.to_json().replace("signal_3", "signal_x");
        assert!(Vocabulary::from_json(&tampered).is_err());
    }
}
