use std::collections::{BTreeSet, HashMap};

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const UNK: &str = "<UNK>";
pub const USER_EMBED: &str = "<USER_EMBED>";
pub const ITEM_EMBED: &str = "<ITEM_EMBED>";

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const USER_EMBED_ID: usize = 3;
pub const ITEM_EMBED_ID: usize = 4;

const RESERVED: [&str; 5] = [BOS, EOS, UNK, USER_EMBED, ITEM_EMBED];

/// Punctuation that attaches to the preceding word when detokenizing.
const CLOSING: &[&str] = &[".", ",", "!", "?", ";", ":", ")"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens take ids 0..5; corpus tokens follow in sorted order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<String> = corpus
            .iter()
            .flat_map(|t| split_words(t.as_ref()))
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words).collect())
    }

    /// Rebuilds a vocabulary from its id-ordered token list. The first five
    /// entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn is_well_formed(&self) -> bool {
        self.tokens.len() >= RESERVED.len()
            && self.tokens.iter().zip(RESERVED).all(|(a, b)| a == b)
            && self.index.len() == self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved_slot(id: usize) -> bool {
        id == USER_EMBED_ID || id == ITEM_EMBED_ID
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Joins tokens with single spaces, attaching closing punctuation to the
    /// previous word. `<BOS>` and `<EOS>` are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS_ID || id == EOS_ID {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            if !out.is_empty() && !CLOSING.contains(&tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

/// Lowercased split into `[a-z0-9']+` words, single punctuation characters,
/// and the literal reserved tokens (matched case-insensitively).
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            if let Some(tok) = RESERVED.iter().find(|r| rest.starts_with(&r.to_lowercase())) {
                flush(&mut word, &mut out);
                out.push(tok.to_string());
                rest = &rest[tok.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() || c == '\'' {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}
