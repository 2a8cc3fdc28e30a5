// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer with optional multi-byte vocabulary.
//!
//! Ids `0..256` are raw bytes, followed by five control tokens. An external
//! vocabulary file adds whole-string pieces after the control tokens; encoding
//! takes the longest matching piece at each offset and falls back to bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SYSTEM: u32 = 258;
pub const USER: u32 = 259;
pub const ASSISTANT: u32 = 260;
/// Vocabulary size of the built-in tokenizer (bytes + control tokens).
pub const BASE_VOCAB: usize = 261;

#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
    max_piece: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VocabFile {
    Wrapped { tokens: Vec<String> },
    Bare(Vec<String>),
}

impl Tokenizer {
    /// The byte-only tokenizer.
    pub fn bytes() -> Self {
        Self::default()
    }

    pub fn with_pieces<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tok = Self::default();
        for p in pieces {
            let bytes = p.as_ref().as_bytes().to_vec();
            if bytes.len() < 2 || tok.lookup.contains_key(&bytes) {
                continue;
            }
            let id = (BASE_VOCAB + tok.pieces.len()) as u32;
            tok.max_piece = tok.max_piece.max(bytes.len());
            tok.lookup.insert(bytes.clone(), id);
            tok.pieces.push(bytes);
        }
        tok
    }

    /// Loads a vocabulary file: a JSON array of strings or `{"tokens": [...]}`.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: VocabFile = serde_json::from_str(&text)?;
        let tokens = match vocab {
            VocabFile::Wrapped { tokens } | VocabFile::Bare(tokens) => tokens,
        };
        Ok(Self::with_pieces(tokens))
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB + self.pieces.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let mut matched = None;
            let longest = self.max_piece.min(bytes.len() - i);
            for len in (2..=longest).rev() {
                if let Some(&id) = self.lookup.get(&bytes[i..i + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(u32::from(bytes[i]));
                    i += 1;
                }
            }
        }
        out
    }

    /// Decodes ids to text; control tokens are dropped, invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if let Some(p) = (id as usize)
                .checked_sub(BASE_VOCAB)
                .and_then(|i| self.pieces.get(i))
            {
                bytes.extend_from_slice(p);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// `BOS [SYSTEM system] USER user ASSISTANT`.
    pub fn chat_prompt(&self, system: Option<&str>, user: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        if let Some(sys) = system {
            ids.push(SYSTEM);
            ids.extend(self.encode(sys));
        }
        ids.push(USER);
        ids.extend(self.encode(user));
        ids.push(ASSISTANT);
        ids
    }
}
