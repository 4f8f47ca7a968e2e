//! Token counting for average-token-length accounting.
//!
//! Caption lengths are only comparable when measured with the same
//! tokenizer, so every count in the output is tagged with [`Tokenizer::id`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sha256_hex;

pub trait Tokenizer: Send + Sync {
    /// Stable identifier written to manifests and stats reports.
    fn id(&self) -> String;
    fn count(&self, text: &str) -> u32;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn id(&self) -> String {
        "whitespace".to_string()
    }

    fn count(&self, text: &str) -> u32 {
        text.split_whitespace().count() as u32
    }
}

/// Classic merge-table BPE over whitespace-separated words.
///
/// The merges file holds one `left right` pair per line in priority order;
/// a leading `#version` line is ignored. Words start as characters with
/// `</w>` appended to the last one.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    ranks: HashMap<(String, String), usize>,
    digest: String,
}

const END_OF_WORD: &str = "</w>";

impl BpeTokenizer {
    pub fn from_merges(text: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    let rank = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => {
                    return Err(Error::schema(
                        format!("merges line {}", lineno + 1),
                        "expected `left right`",
                    ))
                }
            }
        }
        Ok(Self {
            ranks,
            digest: sha256_hex(text.as_bytes())[..12].to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_merges(&text)
    }

    fn word_tokens(&self, word: &str) -> usize {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str(END_OF_WORD);
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, pair)| {
                    self.ranks
                        .get(&(pair[0].clone(), pair[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        symbols.len()
    }
}

impl Tokenizer for BpeTokenizer {
    fn id(&self) -> String {
        format!("bpe:{}", self.digest)
    }

    fn count(&self, text: &str) -> u32 {
        text.split_whitespace().map(|w| self.word_tokens(w)).sum::<usize>() as u32
    }
}

/// Config-file form of a tokenizer choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerSpec {
    #[default]
    Whitespace,
    Bpe { merges: String },
}

impl TokenizerSpec {
    pub fn build(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match self {
            TokenizerSpec::Whitespace => Box::new(WhitespaceTokenizer),
            TokenizerSpec::Bpe { merges } => Box::new(BpeTokenizer::from_file(Path::new(merges))?),
        })
    }
}
