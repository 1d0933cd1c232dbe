//! Whitespace tokenizer over a corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[pad]", "[bos]", "[eos]", "[unk]"];

pub const DEFAULT_MAX_CONTEXT: usize = 20;

/// Lowercase, drop punctuation other than sentence-internal commas, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if ch == ',' {
            flush(&mut word, &mut tokens);
            tokens.push(",".into());
        }
    }
    flush(&mut word, &mut tokens);

    // Only commas with words on both sides survive, and never two in a row.
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        if t == "," {
            let has_before = out.last().is_some_and(|p| p != ",");
            let has_after = tokens[i + 1..].iter().any(|n| n != ",");
            if !(has_before && has_after) {
                continue;
            }
        }
        out.push(t.clone());
    }
    out
}

fn join_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut s = String::new();
    for t in tokens {
        if t != "," && !s.is_empty() {
            s.push(' ');
        }
        s.push_str(t);
    }
    s
}

/// Canonical text form of `text`, i.e. what detokenization of its tokens yields.
pub fn normalized_text(text: &str) -> String {
    let toks = normalize(text);
    join_tokens(toks.iter().map(String::as_str))
}

/// Word-level tokens only (commas dropped); the unit caption metrics compare.
pub fn words(text: &str) -> Vec<String> {
    normalize(text).into_iter().filter(|t| t != ",").collect()
}

/// Token ids wrapped in `BOS … EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the first EOS (the last position if truncation removed it).
    pub fn eos_position(&self) -> usize {
        self.ids
            .iter()
            .position(|&t| t == EOS)
            .unwrap_or(self.ids.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from a text corpus; words are sorted so the vocabulary is order independent.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(normalize).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// `BOS w1 … wn EOS`, truncated to `max_context` with EOS forced last.
    pub fn tokenize(&self, text: &str, max_context: usize) -> TokenSeq {
        let max_context = max_context.max(2);
        let mut ids = Vec::with_capacity(max_context);
        ids.push(BOS);
        ids.extend(normalize(text).iter().map(|w| self.id(w)));
        ids.push(EOS);
        if ids.len() > max_context {
            ids.truncate(max_context);
            ids[max_context - 1] = EOS;
        }
        TokenSeq { ids }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        join_tokens(
            ids.iter()
                .copied()
                .filter(|&t| t != PAD && t != BOS && t != EOS)
                .map(|t| self.token(t)),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Vocab = serde_json::from_str(&text)?;
        if v.tokens.len() < SPECIALS.len()
            || v.tokens[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Config(format!(
                "{}: vocabulary does not start with the special tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(v.tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}
