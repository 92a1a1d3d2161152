//! WordPiece tokenization with reserved special tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];

/// Words longer than this (in chars) become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

const CONTINUATION: &str = "##";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary where position in `tokens` is the id. The four
    /// special tokens must occupy ids 0..4 in order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Vocab(format!(
                "missing special tokens: the first four entries must be {SPECIAL_TOKENS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!(
                    "invalid token {tok:?} on line {}",
                    i + 1
                )));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!(
                    "duplicate token {tok:?} on line {}",
                    i + 1
                )));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Specials followed by `pieces`.
    pub fn with_specials<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(pieces.into_iter().map(Into::into));
        Self::new(tokens)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One token per line, newline-terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id <= EOS
    }
}

/// An encoded caption. `ids` may carry trailing padding; `len` counts the
/// tokens before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub len: usize,
}

impl TokenSeq {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let len = ids.iter().position(|&t| t == PAD).unwrap_or(ids.len());
        Self { ids, len }
    }

    /// Tokens before padding.
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

/// Lowercases and splits on whitespace, emitting each punctuation char as
/// its own word.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(ch) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// The text form that `decode(encode(text))` reproduces for coverable input.
pub fn normalize(text: &str) -> String {
    basic_split(text).join(" ")
}

pub(crate) fn is_punctuation(ch: char) -> bool {
    ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace() && !ch.is_control())
}

/// Greedy longest-match-first pieces for one word, or `None` if some
/// remainder cannot be matched.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION);
            }
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Raw piece ids for `text`, without specials or padding.
pub fn encode_pieces(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    basic_split(text)
        .iter()
        .flat_map(|w| wordpiece(w, vocab).unwrap_or_else(|| vec![UNK]))
        .collect()
}

/// `[BOS] pieces… [EOS]`, truncated so `[EOS]` stays last, then padded to
/// `max_len`. `max_len` is clamped to at least 2.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSeq {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(encode_pieces(text, vocab).into_iter().take(max_len - 2));
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    TokenSeq { ids, len }
}

/// Drops specials and fuses `##` continuations onto the previous piece.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::TokenOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if Vocabulary::is_special(id) {
            continue;
        }
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}
