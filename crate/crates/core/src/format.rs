//! Rigid formats and the aligned symbol streams derived from them.
//!
//! Every stream is aligned with the *target* sequence: position `t` carries
//! the token to predict at step `t` and the format/position/segment symbols
//! describing it. Each line contributes its tokens followed by `</s>`, and a
//! single `<eos>` closes the sequence. The model input at position `t` is the
//! previous target (or `<bos>` at `t = 0`), so `<bos>` shares position 0 with
//! the symbols of the first target.
//!
//! Format DSL, one format line per text line, slots separated by spaces:
//!
//! ```text
//! _ _ _ love ,
//! bends _ _ _ _ _:A .
//! ```
//!
//! `_` is a free slot, `_:A` a free slot in rhyme group `A`, a single
//! punctuation character is a punctuation slot, and any other word is a fixed
//! token. `word:A` fixes a token that also belongs to rhyme group `A`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;

use crate::corpus::{is_reserved, PunctSet, Sample, TokenId, Vocab, EOS_ID, SEP_ID};
use crate::error::{Error, Result};

/// Symbol ids shared by the c, p and s streams.
pub mod sym {
    pub const PAD: usize = 0;
    /// Reserved in every table; the shifted alignment never emits it.
    pub const BOS: usize = 1;
    pub const SEP: usize = 2;
    pub const EOS: usize = 3;
    /// First id of the per-index range in the p and s tables.
    pub const INDEX_BASE: usize = 4;

    pub const GENERAL: usize = 4;
    pub const PUNCT: usize = 5;
    pub const RHYME: usize = 6;
    pub const C_VOCAB: usize = 7;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Slot {
    General,
    Punct(String),
    Rhyme(String),
    Fixed { token: String, rhyme: Option<String> },
}

impl Slot {
    pub fn fixed(token: impl Into<String>) -> Self {
        Slot::Fixed {
            token: token.into(),
            rhyme: None,
        }
    }

    pub fn rhyme_group(&self) -> Option<&str> {
        match self {
            Slot::Rhyme(g) => Some(g),
            Slot::Fixed { rhyme: Some(g), .. } => Some(g),
            _ => None,
        }
    }

    fn kind(&self) -> SlotKind {
        match self {
            Slot::Punct(_) => SlotKind::Punct,
            s if s.rhyme_group().is_some() => SlotKind::Rhyme,
            _ => SlotKind::General,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    General,
    Punct,
    Rhyme,
}

impl SlotKind {
    fn symbol(self) -> usize {
        match self {
            SlotKind::General => sym::GENERAL,
            SlotKind::Punct => sym::PUNCT,
            SlotKind::Rhyme => sym::RHYME,
        }
    }
}

/// A slot address: (line, index within line).
pub type SlotPos = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    pub lines: Vec<Vec<Slot>>,
}

impl FormatSpec {
    pub fn line_lengths(&self) -> Vec<usize> {
        self.lines.iter().map(Vec::len).collect()
    }

    /// Stream length: slots plus one separator per line plus `<eos>`.
    pub fn stream_len(&self) -> usize {
        self.lines.iter().map(|l| l.len() + 1).sum::<usize>() + 1
    }

    pub fn rhyme_groups(&self) -> BTreeMap<String, Vec<SlotPos>> {
        let mut groups: BTreeMap<String, Vec<SlotPos>> = BTreeMap::new();
        for (i, line) in self.lines.iter().enumerate() {
            for (j, slot) in line.iter().enumerate() {
                if let Some(g) = slot.rhyme_group() {
                    groups.entry(g.to_string()).or_default().push((i, j));
                }
            }
        }
        groups
    }

    /// Rhyme groups with fewer than two slots.
    pub fn degenerate_groups(&self) -> Vec<String> {
        self.rhyme_groups()
            .into_iter()
            .filter(|(_, v)| v.len() < 2)
            .map(|(g, _)| g)
            .collect()
    }

    pub fn fixed_positions(&self) -> Vec<(SlotPos, &str)> {
        let mut out = Vec::new();
        for (i, line) in self.lines.iter().enumerate() {
            for (j, slot) in line.iter().enumerate() {
                if let Slot::Fixed { token, .. } = slot {
                    out.push(((i, j), token.as_str()));
                }
            }
        }
        out
    }

    /// Punctuation tokens expected in each line, in order.
    pub fn line_punct(&self) -> Vec<Vec<&str>> {
        self.lines
            .iter()
            .map(|l| {
                l.iter()
                    .filter_map(|s| match s {
                        Slot::Punct(p) => Some(p.as_str()),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_format(self))
    }
}

/// Index of slot `(line, idx)` in the flattened stream.
pub fn global_index(line_lengths: &[usize], pos: SlotPos) -> usize {
    line_lengths[..pos.0].iter().map(|n| n + 1).sum::<usize>() + pos.1
}

/// Inverse of [`global_index`]; `None` for separators and `<eos>`.
pub fn slot_at(line_lengths: &[usize], mut index: usize) -> Option<SlotPos> {
    for (i, &n) in line_lengths.iter().enumerate() {
        if index < n {
            return Some((i, index));
        }
        if index == n {
            return None;
        }
        index -= n + 1;
    }
    None
}

pub fn parse_format(dsl: &str) -> Result<FormatSpec> {
    let punct = PunctSet::default();
    let mut lines = Vec::new();
    for (ln, raw) in dsl.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let mut slots = Vec::new();
        let mut col = 0usize;
        let chars: Vec<char> = raw.chars().collect();
        while col < chars.len() {
            if chars[col].is_whitespace() {
                col += 1;
                continue;
            }
            let start = col;
            while col < chars.len() && !chars[col].is_whitespace() {
                col += 1;
            }
            let word: String = chars[start..col].iter().collect();
            let err = |message: String| Error::FormatParse {
                line: ln + 1,
                column: start + 1,
                message,
            };
            slots.push(parse_slot(&word, &punct).map_err(err)?);
        }
        lines.push(slots);
    }
    if lines.is_empty() {
        return Err(Error::FormatParse {
            line: 1,
            column: 1,
            message: "empty format".into(),
        });
    }
    Ok(FormatSpec { lines })
}

fn valid_group(g: &str) -> bool {
    !g.is_empty() && g.chars().all(|c| c.is_alphanumeric())
}

fn parse_slot(word: &str, punct: &PunctSet) -> std::result::Result<Slot, String> {
    if word == "_" {
        return Ok(Slot::General);
    }
    if let Some(group) = word.strip_prefix("_:") {
        return if valid_group(group) {
            Ok(Slot::Rhyme(group.to_string()))
        } else {
            Err(format!("bad rhyme group in `{word}`"))
        };
    }
    if word.starts_with('_') {
        return Err(format!("unknown slot syntax `{word}`"));
    }
    if punct.is_punct(word) {
        return Ok(Slot::Punct(word.to_string()));
    }
    let (token, rhyme) = match word.rsplit_once(':') {
        Some((t, g)) if !t.is_empty() && valid_group(g) => (t, Some(g.to_string())),
        _ => (word, None),
    };
    if is_reserved(token) {
        return Err(format!("reserved marker `{token}` cannot be a fixed token"));
    }
    Ok(Slot::Fixed {
        token: token.to_string(),
        rhyme,
    })
}

pub fn render_format(spec: &FormatSpec) -> String {
    let mut out = String::new();
    for (i, line) in spec.lines.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let words: Vec<String> = line
            .iter()
            .map(|s| match s {
                Slot::General => "_".to_string(),
                Slot::Rhyme(g) => format!("_:{g}"),
                Slot::Punct(p) => p.clone(),
                Slot::Fixed { token, rhyme: None } => token.clone(),
                Slot::Fixed {
                    token,
                    rhyme: Some(g),
                } => format!("{token}:{g}"),
            })
            .collect();
        out.push_str(&words.join(" "));
    }
    out
}

/// Parses a file holding several formats separated by blank lines.
pub fn parse_format_file(text: &str) -> Result<Vec<FormatSpec>> {
    let mut specs = Vec::new();
    let mut block = String::new();
    let mut block_start = 0usize;
    for (i, line) in text.lines().chain(std::iter::once("")).enumerate() {
        if line.trim().is_empty() {
            if !block.is_empty() {
                let spec = parse_format(&block).map_err(|e| match e {
                    Error::FormatParse {
                        line,
                        column,
                        message,
                    } => Error::FormatParse {
                        line: line + block_start,
                        column,
                        message,
                    },
                    other => other,
                })?;
                specs.push(spec);
                block.clear();
            }
            block_start = i + 1;
        } else {
            block.push_str(line);
            block.push('\n');
        }
    }
    if specs.is_empty() {
        return parse_format("").map(|s| vec![s]);
    }
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionOrder {
    /// p counts down to p₀ at the line-final token.
    #[default]
    Descending,
    /// p counts up from p₀ at the line-initial token.
    Ascending,
}

#[derive(Debug, Clone)]
pub struct SymbolConfig {
    pub punct: PunctSet,
    pub order: PositionOrder,
    pub max_line_len: usize,
    pub max_lines: usize,
}

impl Default for SymbolConfig {
    fn default() -> Self {
        Self {
            punct: PunctSet::default(),
            order: PositionOrder::Descending,
            max_line_len: 64,
            max_lines: 64,
        }
    }
}

impl SymbolConfig {
    pub fn p_vocab(&self) -> usize {
        sym::INDEX_BASE + self.max_line_len
    }

    pub fn s_vocab(&self) -> usize {
        sym::INDEX_BASE + self.max_lines
    }
}

/// Format-only streams: everything the model is told about a sequence
/// before any token is generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatStreams {
    pub c: Vec<usize>,
    pub p: Vec<usize>,
    pub s: Vec<usize>,
    pub g: Vec<usize>,
}

impl FormatStreams {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// Aligned target tokens and symbol streams, all of length T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub y: Vec<TokenId>,
    pub c: Vec<usize>,
    pub p: Vec<usize>,
    pub s: Vec<usize>,
    pub g: Vec<usize>,
}

impl SymbolSequence {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn streams(&self) -> FormatStreams {
        FormatStreams {
            c: self.c.clone(),
            p: self.p.clone(),
            s: self.s.clone(),
            g: self.g.clone(),
        }
    }

    /// Model input: `<bos>` followed by the targets shifted right by one.
    pub fn inputs(&self) -> Vec<TokenId> {
        let mut x = Vec::with_capacity(self.y.len());
        x.push(crate::corpus::BOS_ID);
        x.extend_from_slice(&self.y[..self.y.len().saturating_sub(1)]);
        x
    }
}

fn build_streams(kinds: &[Vec<SlotKind>], cfg: &SymbolConfig) -> Result<FormatStreams> {
    if kinds.len() > cfg.max_lines {
        return Err(Error::TooManyLines {
            lines: kinds.len(),
            max: cfg.max_lines,
        });
    }
    let total = kinds.iter().map(|l| l.len() + 1).sum::<usize>() + 1;
    let mut st = FormatStreams {
        c: Vec::with_capacity(total),
        p: Vec::with_capacity(total),
        s: Vec::with_capacity(total),
        g: (0..total).collect(),
    };
    for (i, line) in kinds.iter().enumerate() {
        let n = line.len();
        if n > cfg.max_line_len {
            return Err(Error::LineTooLong {
                line: i,
                len: n,
                max: cfg.max_line_len,
            });
        }
        for (j, kind) in line.iter().enumerate() {
            st.c.push(kind.symbol());
            let p = match cfg.order {
                PositionOrder::Descending => n - 1 - j,
                PositionOrder::Ascending => j,
            };
            st.p.push(sym::INDEX_BASE + p);
            st.s.push(sym::INDEX_BASE + i);
        }
        st.c.push(sym::SEP);
        st.p.push(sym::SEP);
        st.s.push(sym::SEP);
    }
    st.c.push(sym::EOS);
    st.p.push(sym::EOS);
    st.s.push(sym::EOS);
    Ok(st)
}

/// Derives the training-form symbol sequence of a sample.
pub fn derive_symbols(
    sample: &Sample,
    rhyme_slots: &BTreeSet<SlotPos>,
    vocab: &Vocab,
    cfg: &SymbolConfig,
) -> Result<SymbolSequence> {
    for &(line, index) in rhyme_slots {
        if sample.lines.get(line).is_none_or(|l| index >= l.len()) {
            return Err(Error::RhymeSlotOutOfRange { line, index });
        }
    }
    let kinds: Vec<Vec<SlotKind>> = sample
        .lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            line.iter()
                .enumerate()
                .map(|(j, tok)| {
                    if cfg.punct.is_punct(tok) {
                        SlotKind::Punct
                    } else if rhyme_slots.contains(&(i, j)) {
                        SlotKind::Rhyme
                    } else {
                        SlotKind::General
                    }
                })
                .collect()
        })
        .collect();
    let st = build_streams(&kinds, cfg)?;
    let mut y = Vec::with_capacity(st.len());
    for line in &sample.lines {
        y.extend(vocab.encode(line));
        y.push(SEP_ID);
    }
    y.push(EOS_ID);
    Ok(SymbolSequence {
        y,
        c: st.c,
        p: st.p,
        s: st.s,
        g: st.g,
    })
}

/// What decoding must or may emit at one stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionRule {
    Free,
    Punct(TokenId),
    Fixed(TokenId),
    Sep,
    Eos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledFormat {
    pub streams: FormatStreams,
    /// Fixed-token constraints by stream index.
    pub fixed: BTreeMap<usize, TokenId>,
    pub rules: Vec<PositionRule>,
    pub line_lengths: Vec<usize>,
}

impl CompiledFormat {
    /// Fixed tokens as a reveal channel for the format summary.
    pub fn reveals(&self) -> Vec<Option<TokenId>> {
        (0..self.streams.len())
            .map(|t| self.fixed.get(&t).copied())
            .collect()
    }
}

pub fn spec_to_symbols(spec: &FormatSpec, vocab: &Vocab, cfg: &SymbolConfig) -> Result<CompiledFormat> {
    let kinds: Vec<Vec<SlotKind>> = spec
        .lines
        .iter()
        .map(|l| l.iter().map(Slot::kind).collect())
        .collect();
    let streams = build_streams(&kinds, cfg)?;
    let mut missing = Vec::new();
    let mut fixed = BTreeMap::new();
    let mut rules = Vec::with_capacity(streams.len());
    let lookup = |tok: &str, missing: &mut Vec<String>| match vocab.id(tok) {
        Some(id) => id,
        None => {
            if !missing.iter().any(|m| m == tok) {
                missing.push(tok.to_string());
            }
            0
        }
    };
    for line in &spec.lines {
        for slot in line {
            let rule = match slot {
                Slot::General | Slot::Rhyme(_) => PositionRule::Free,
                Slot::Punct(p) => PositionRule::Punct(lookup(p, &mut missing)),
                Slot::Fixed { token, .. } => {
                    let id = lookup(token, &mut missing);
                    fixed.insert(rules.len(), id);
                    PositionRule::Fixed(id)
                }
            };
            rules.push(rule);
        }
        rules.push(PositionRule::Sep);
    }
    rules.push(PositionRule::Eos);
    if !missing.is_empty() {
        return Err(Error::UnknownFixedTokens { tokens: missing });
    }
    Ok(CompiledFormat {
        streams,
        fixed,
        rules,
        line_lengths: spec.line_lengths(),
    })
}

/// Draws the reveal channel for masked-format pretraining.
///
/// One uniform draw is consumed per eligible (general or rhyme) position, in
/// order, and the position is revealed when the draw falls below
/// `reveal_rate`. Punctuation and separators are never revealed.
pub fn mask_for_pretraining<R: Rng + ?Sized>(
    seq: &SymbolSequence,
    reveal_rate: f64,
    rng: &mut R,
) -> Vec<Option<TokenId>> {
    seq.c
        .iter()
        .zip(&seq.y)
        .map(|(&c, &y)| {
            if c == sym::GENERAL || c == sym::RHYME {
                let u: f64 = rng.random();
                (u < reveal_rate).then_some(y)
            } else {
                None
            }
        })
        .collect()
}

/// Builds a polishing format from a previous output.
///
/// `lock` holds stream indices (separators counted) whose tokens are kept.
/// `rhyme_slots` carries the rhyme groups of the previous format.
pub fn rebuild_format(
    lines: &[Vec<String>],
    lock: &BTreeSet<usize>,
    rhyme_slots: &BTreeMap<SlotPos, String>,
    punct: &PunctSet,
) -> Result<FormatSpec> {
    let lens: Vec<usize> = lines.iter().map(Vec::len).collect();
    let mut locked = BTreeSet::new();
    for &idx in lock {
        locked.insert(slot_at(&lens, idx).ok_or(Error::InvalidLock(idx))?);
    }
    let out = lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            line.iter()
                .enumerate()
                .map(|(j, tok)| {
                    let rhyme = rhyme_slots.get(&(i, j)).cloned();
                    if punct.is_punct(tok) {
                        Slot::Punct(tok.clone())
                    } else if locked.contains(&(i, j)) {
                        Slot::Fixed {
                            token: tok.clone(),
                            rhyme,
                        }
                    } else if let Some(g) = rhyme {
                        Slot::Rhyme(g)
                    } else {
                        Slot::General
                    }
                })
                .collect()
        })
        .collect();
    Ok(FormatSpec { lines: out })
}

/// The format a sample was written in, with the given rhyme groups.
pub fn format_of_sample(
    sample: &Sample,
    rhyme_slots: &BTreeMap<SlotPos, String>,
    punct: &PunctSet,
) -> FormatSpec {
    rebuild_format(&sample.lines, &BTreeSet::new(), rhyme_slots, punct)
        .expect("empty lock set is always valid")
}

/// Converts a list of rhyme groups into a slot → group-name map.
pub fn rhyme_map(groups: &[Vec<SlotPos>]) -> BTreeMap<SlotPos, String> {
    let mut map = BTreeMap::new();
    for (gi, group) in groups.iter().enumerate() {
        let name = group_name(gi);
        for &pos in group {
            map.insert(pos, name.clone());
        }
    }
    map
}

/// `A`, `B`, … `Z`, `A1`, `B1`, …
pub fn group_name(i: usize) -> String {
    let letter = (b'A' + (i % 26) as u8) as char;
    if i < 26 {
        letter.to_string()
    } else {
        format!("{letter}{}", i / 26)
    }
}
