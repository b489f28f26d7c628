//! Whitespace tokenizer over a corpus-built vocabulary.
//!
//! Words are split on whitespace; trailing punctuation (`. , ? ; : !`) is
//! split off into separate tokens. Decoding re-attaches punctuation to the
//! preceding word, so `decode(encode(t)) == t` for text in canonical form
//! (single spaces, no space before punctuation).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenIds = Vec<u32>;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;
pub const IMG_G: u32 = 5;
pub const IMG_L: u32 = 6;

const SPECIALS: [&str; 7] = ["<pad>", "<unk>", "<cls>", "<bos>", "<eos>", "<img_g>", "<img_l>"];
const PUNCT: [char; 6] = ['.', ',', '?', ';', ':', '!'];

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let core = word.trim_end_matches(PUNCT);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        for ch in word[core.len()..].chars() {
            out.push(ch.to_string());
        }
    }
    out
}

pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut s = String::new();
    for w in words {
        let w = w.as_ref();
        let is_punct = w.chars().count() == 1 && w.chars().all(|c| PUNCT.contains(&c));
        if !s.is_empty() && !is_punct {
            s.push(' ');
        }
        s.push_str(w);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials first, then every distinct word of `texts` in sorted order.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| split_words(t.as_ref()))
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words))
            .expect("specials are distinct")
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Tokenization("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Tokenization(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Strict encoding: unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<TokenIds> {
        split_words(text)
            .into_iter()
            .map(|w| {
                self.id(&w)
                    .ok_or_else(|| Error::Tokenization(format!("unknown word {w:?}")))
            })
            .collect()
    }

    /// Unknown words map to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> TokenIds {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    /// Decodes ids, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id as usize >= SPECIALS.len())
            .filter_map(|&id| self.token(id))
            .collect();
        join_words(&words)
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(id) => Err(Error::Tokenization(format!(
                "token id {id} outside vocabulary of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

/// Text-encoder input: `<cls>` followed by the ids, truncated at the tail to
/// `max_len` positions in total.
pub fn text_encoder_ids(ids: &[u32], max_len: usize) -> TokenIds {
    std::iter::once(CLS)
        .chain(ids.iter().copied())
        .take(max_len.max(1))
        .collect()
}
