use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_VOCAB_SIZE: usize = 2048;

/// Lower-cased word tokens; every punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Bijective word ↔ id map with the four specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary; ties keep first-occurrence order.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} cannot hold the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in tokenize(text) {
                let order = counts.len();
                counts.entry(tok).or_insert((0, order)).0 += 1;
            }
        }
        if !seen_any {
            return Err(Error::Data("cannot build a vocabulary from an empty stream".into()));
        }
        let mut ranked: Vec<(String, usize, usize)> =
            counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(max_size - SPECIALS.len()).map(|(t, _, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Vocabulary { tokens, index }
    }

    pub fn reindex(&mut self) {
        *self = Self::from_tokens(std::mem::take(&mut self.tokens));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
