//! Character vocabularies for the encoder embedding.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;

const PUNCT: [char; 5] = [' ', '.', ',', '?', '!'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    /// The whole Devanagari block plus space and the retained punctuation.
    Devanagari,
    /// Lower-case a-z plus space and punctuation, for English pre-training.
    Roman,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocabulary {
    kind: VocabKind,
    symbols: Vec<char>,
}

impl CharVocabulary {
    pub fn new(kind: VocabKind) -> Self {
        let mut symbols = PUNCT.to_vec();
        match kind {
            VocabKind::Devanagari => symbols.extend('\u{0900}'..='\u{097F}'),
            VocabKind::Roman => symbols.extend('a'..='z'),
        }
        Self { kind, symbols }
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// Size including PAD and EOS.
    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: u32) -> Option<char> {
        id.checked_sub(2).and_then(|i| self.symbols.get(i as usize).copied())
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.symbols.iter().position(|&s| s == c).map(|i| i as u32 + 2)
    }

    /// Maps text to ids and appends EOS. Roman text is lower-cased first.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.chars().count() + 1);
        for c in text.chars() {
            let c = match self.kind {
                VocabKind::Roman => c.to_ascii_lowercase(),
                VocabKind::Devanagari => c,
            };
            out.push(self.id(c).ok_or_else(|| ModelError::UnknownSymbol {
                ch: c,
                vocab: format!("{:?}", self.kind).to_lowercase(),
            })?);
        }
        out.push(EOS);
        Ok(out)
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(ModelError::OutOfVocabulary { id, size: self.len() }),
            None => Ok(()),
        }
    }
}
