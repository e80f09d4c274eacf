//! Glue between corpora, symbol derivation, generation and metrics.

use std::collections::BTreeSet;

use crate::corpus::{PunctSet, Sample, Vocab};
use crate::decoding::{DecodeConfig, Generator, Strategy};
use crate::error::Result;
use crate::format::{derive_symbols, format_of_sample, rhyme_map, FormatSpec, SlotPos, SymbolConfig, SymbolSequence};
use crate::metrics::{distinct, flatten, format_f1, integrity, ppl, rhyme_f1, EvalReport, SentenceScorer};
use crate::model::Model;
use crate::phonetics::{annotate_rhymes, Lexicon};

/// Samples with their rhyme groups, formats and training sequences.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub groups: Vec<Vec<Vec<SlotPos>>>,
    pub formats: Vec<FormatSpec>,
    pub sequences: Vec<SymbolSequence>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Restricts to the given sample indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            formats: idx.iter().map(|&i| self.formats[i].clone()).collect(),
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

/// Annotates rhymes (when a lexicon is given) and derives symbol sequences.
pub fn prepare(samples: Vec<Sample>, vocab: &Vocab, lex: Option<&Lexicon>, sc: &SymbolConfig) -> Result<Prepared> {
    let groups: Vec<Vec<Vec<SlotPos>>> = samples
        .iter()
        .map(|s| lex.map(|l| annotate_rhymes(s, l, &sc.punct)).unwrap_or_default())
        .collect();
    prepare_with_groups(samples, groups, vocab, sc)
}

/// Like [`prepare`] but drops samples that do not fit `sc` or `max_len`.
///
/// Returns the kept samples and the number dropped.
pub fn prepare_fitting(
    samples: Vec<Sample>,
    vocab: &Vocab,
    lex: Option<&Lexicon>,
    sc: &SymbolConfig,
    max_len: usize,
) -> Result<(Prepared, usize)> {
    let total = samples.len();
    let kept: Vec<Sample> = samples
        .into_iter()
        .filter(|s| {
            s.lines.len() <= sc.max_lines
                && s.lines.iter().all(|l| l.len() <= sc.max_line_len)
                && s.token_count() + s.lines.len() < max_len
        })
        .collect();
    let dropped = total - kept.len();
    Ok((prepare(kept, vocab, lex, sc)?, dropped))
}

/// Like [`prepare`] with rhyme groups supplied by the caller.
pub fn prepare_with_groups(
    samples: Vec<Sample>,
    groups: Vec<Vec<Vec<SlotPos>>>,
    vocab: &Vocab,
    sc: &SymbolConfig,
) -> Result<Prepared> {
    let mut formats = Vec::with_capacity(samples.len());
    let mut sequences = Vec::with_capacity(samples.len());
    for (s, g) in samples.iter().zip(&groups) {
        let slots: BTreeSet<SlotPos> = g.iter().flatten().copied().collect();
        sequences.push(derive_symbols(s, &slots, vocab, sc)?);
        formats.push(format_of_sample(s, &rhyme_map(g), &sc.punct));
    }
    Ok(Prepared {
        samples,
        groups,
        formats,
        sequences,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    /// Allowed sentence-length difference for format matching.
    pub delta: usize,
    pub check_punct: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            delta: 0,
            check_punct: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outputs: Vec<Vec<Vec<String>>>,
}

/// Generates one output per test format and scores everything.
pub fn generate_outputs(
    model: &Model,
    vocab: &Vocab,
    punct: &PunctSet,
    formats: &[FormatSpec],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Vec<String>>>> {
    let gen = Generator::new(model, vocab, punct.clone());
    match cfg.strategy {
        Strategy::TopK => gen.sample_all(formats, cfg),
        Strategy::Beam => formats.iter().map(|f| gen.generate(f, cfg)).collect(),
    }
}

pub fn evaluate(
    model: &Model,
    scorer: &dyn SentenceScorer,
    vocab: &Vocab,
    test: &Prepared,
    lex: &Lexicon,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let punct = PunctSet::default();
    let outputs = generate_outputs(model, vocab, &punct, &test.formats, &cfg.decode)?;
    let report = score(model, scorer, test, &outputs, lex, cfg)?;
    Ok(Evaluation { report, outputs })
}

/// Metrics for given outputs against the test set.
pub fn score(
    model: &Model,
    scorer: &dyn SentenceScorer,
    test: &Prepared,
    outputs: &[Vec<Vec<String>>],
    lex: &Lexicon,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let punct = PunctSet::default();
    let flat: Vec<Vec<String>> = outputs.iter().map(|o| flatten(o)).collect();
    Ok(EvalReport::new(
        ppl(model, &test.sequences)?,
        distinct(&flat),
        format_f1(&test.formats, outputs, cfg.delta, cfg.check_punct, &punct),
        rhyme_f1(&test.groups, outputs, lex),
        integrity(scorer, outputs)?,
    ))
}
