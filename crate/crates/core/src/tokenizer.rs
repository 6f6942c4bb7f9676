//! Byte-level and whitespace tokenizers.
//!
//! Byte mode maps each byte to its own id and never produces unknowns, so
//! identity terms like "enby" or "trans*" always tokenize. Whitespace mode
//! builds a word vocabulary from a corpus and is the readable/faster option
//! for small experiments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable tokenizer description (stored inside checkpoints).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TokenizerSpec {
    Byte,
    Whitespace { vocab: Vec<String> },
}

/// Token ids are u32; the model vocab size bounds them.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    index: HashMap<String, u32>,
}

/// Whitespace mode reserves id 0 for padding and id 1 for unknown words.
pub const WS_PAD_ID: u32 = 0;
pub const WS_UNK_ID: u32 = 1;
const WS_RESERVED: u32 = 2;

/// Byte mode uses ids 0..=255 for bytes and 256 for padding.
pub const BYTE_PAD_ID: u32 = 256;

impl Tokenizer {
    pub fn byte() -> Self {
        Self {
            spec: TokenizerSpec::Byte,
            index: HashMap::new(),
        }
    }

    /// Build a whitespace tokenizer whose vocabulary is every distinct
    /// whitespace-separated word in `lines`, sorted lexicographically.
    pub fn whitespace_from_lines<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Self {
        let mut words: Vec<String> = lines
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect();
        words.sort_unstable();
        words.dedup();
        Self::from_spec(TokenizerSpec::Whitespace { vocab: words })
    }

    pub fn from_spec(spec: TokenizerSpec) -> Self {
        let index = match &spec {
            TokenizerSpec::Byte => HashMap::new(),
            TokenizerSpec::Whitespace { vocab } => vocab
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as u32 + WS_RESERVED))
                .collect(),
        };
        Self { spec, index }
    }

    pub fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        match &self.spec {
            TokenizerSpec::Byte => 257,
            TokenizerSpec::Whitespace { vocab } => vocab.len() + WS_RESERVED as usize,
        }
    }

    pub fn pad_id(&self) -> u32 {
        match &self.spec {
            TokenizerSpec::Byte => BYTE_PAD_ID,
            TokenizerSpec::Whitespace { .. } => WS_PAD_ID,
        }
    }

    pub fn unk_id(&self) -> Option<u32> {
        match &self.spec {
            TokenizerSpec::Byte => None,
            TokenizerSpec::Whitespace { .. } => Some(WS_UNK_ID),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        match &self.spec {
            TokenizerSpec::Byte => text.bytes().map(u32::from).collect(),
            TokenizerSpec::Whitespace { .. } => text
                .split_whitespace()
                .map(|w| *self.index.get(w).unwrap_or(&WS_UNK_ID))
                .collect(),
        }
    }

    /// Inverse of `tokenize` for byte mode; whitespace mode joins words with
    /// single spaces (the original spacing is not recoverable).
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        match &self.spec {
            TokenizerSpec::Byte => {
                let bytes: Vec<u8> = ids
                    .iter()
                    .map(|&id| {
                        u8::try_from(id).map_err(|_| Error::Tokenize(format!("id {id} is not a byte")))
                    })
                    .collect::<Result<_>>()?;
                String::from_utf8(bytes).map_err(|e| Error::Tokenize(e.to_string()))
            }
            TokenizerSpec::Whitespace { vocab } => {
                let words: Vec<&str> = ids
                    .iter()
                    .map(|&id| match id {
                        WS_PAD_ID => Ok("<pad>"),
                        WS_UNK_ID => Ok("<unk>"),
                        _ => vocab
                            .get((id - WS_RESERVED) as usize)
                            .map(String::as_str)
                            .ok_or_else(|| Error::Tokenize(format!("id {id} out of vocab"))),
                    })
                    .collect::<Result<_>>()?;
                Ok(words.join(" "))
            }
        }
    }
}
