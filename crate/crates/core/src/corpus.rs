//! Corpus loading, tokenization and vocabulary construction.
//!
//! Corpus files are UTF-8 plain text with one clause per physical line and a
//! blank line between samples. Tokens are kept verbatim on load; mapping to
//! `<unk>` only happens when a sample is encoded against a [`Vocab`].

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const SEP: &str = "</s>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const SEP_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

pub const RESERVED: [&str; 5] = [PAD, BOS, SEP, EOS, UNK];

pub fn is_reserved(token: &str) -> bool {
    RESERVED.contains(&token)
}

/// Characters treated as standalone punctuation tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PunctSet {
    chars: Vec<char>,
}

impl Default for PunctSet {
    fn default() -> Self {
        Self::new(",.;:!?，。；：！？、".chars())
    }
}

impl PunctSet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut chars: Vec<char> = chars.into_iter().collect();
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.binary_search(&c).is_ok()
    }

    /// A token is punctuation when it is exactly one punctuation character.
    pub fn is_punct(&self, token: &str) -> bool {
        let mut it = token.chars();
        matches!((it.next(), it.next()), (Some(c), None) if self.contains(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenizeMode {
    /// Every non-whitespace character is a token (Chinese).
    Char,
    /// Whitespace-separated words with punctuation split off (English).
    Word,
}

impl std::str::FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(Error::Config(format!("unknown tokenize mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub mode: TokenizeMode,
    pub punct: PunctSet,
}

impl Tokenizer {
    pub fn new(mode: TokenizeMode) -> Self {
        Self {
            mode,
            punct: PunctSet::default(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        match self.mode {
            TokenizeMode::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
            TokenizeMode::Word => {
                let mut out = Vec::new();
                for word in text.split_whitespace() {
                    let mut current = String::new();
                    for c in word.chars() {
                        if self.punct.contains(c) {
                            if !current.is_empty() {
                                out.push(std::mem::take(&mut current));
                            }
                            out.push(c.to_string());
                        } else {
                            current.push(c);
                        }
                    }
                    if !current.is_empty() {
                        out.push(current);
                    }
                }
                out
            }
        }
    }

    /// Joins tokens back into display text for one line.
    pub fn join(&self, tokens: &[String]) -> String {
        match self.mode {
            TokenizeMode::Char => tokens.concat(),
            TokenizeMode::Word => tokens.join(" "),
        }
    }
}

/// Tokenizes with the default punctuation set.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    Tokenizer::new(mode).tokenize(text)
}

/// One training example: a list of clauses, each a non-empty token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub lines: Vec<Vec<String>>,
}

impl Sample {
    /// Returns `None` when a line is empty or contains a reserved marker.
    pub fn new(lines: Vec<Vec<String>>) -> Option<Self> {
        let ok = !lines.is_empty()
            && lines
                .iter()
                .all(|l| !l.is_empty() && l.iter().all(|t| !is_reserved(t)));
        ok.then_some(Self { lines })
    }

    pub fn from_strs(lines: &[&[&str]]) -> Option<Self> {
        Self::new(
            lines
                .iter()
                .map(|l| l.iter().map(|t| t.to_string()).collect())
                .collect(),
        )
    }

    pub fn token_count(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.lines.iter().flatten()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    /// Blocks dropped because they had no usable lines or held reserved markers.
    pub skipped: usize,
}

pub fn parse_corpus(text: &str, tokenizer: &Tokenizer) -> Corpus {
    let mut corpus = Corpus::default();
    let mut block: Vec<Vec<String>> = Vec::new();
    let flush = |block: &mut Vec<Vec<String>>, corpus: &mut Corpus| {
        if block.is_empty() {
            return;
        }
        match Sample::new(std::mem::take(block)) {
            Some(s) => corpus.samples.push(s),
            None => corpus.skipped += 1,
        }
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut block, &mut corpus);
        } else {
            block.push(tokenizer.tokenize(line));
        }
    }
    flush(&mut block, &mut corpus);
    corpus
}

pub fn load_corpus(path: impl AsRef<Path>, tokenizer: &Tokenizer) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_corpus(&text, tokenizer);
    if corpus.skipped > 0 {
        log::warn!("{}: skipped {} malformed samples", path.display(), corpus.skipped);
    }
    Ok(corpus)
}

/// Token ↔ id bijection. Ids 0–4 are always the reserved markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens in the given order.
    pub fn from_tokens<I, T>(tokens: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            all.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in tokens {
            let t = t.into();
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len());
                all.push(t);
            }
        }
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// One token per line; line number minus one is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(format!(
                "{}: vocab must start with the reserved markers",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens[RESERVED.len()..].iter().copied()))
    }
}

/// Frequency-descending, then lexicographic; reserved ids are fixed at 0–4.
pub fn build_vocab(samples: &[Sample], min_freq: usize) -> Vocab {
    let min_freq = min_freq.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in samples.iter().flat_map(Sample::tokens) {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, n)| n >= min_freq && !is_reserved(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}
