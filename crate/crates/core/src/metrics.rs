//! Automatic evaluation of generated text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{PunctSet, TokenId, Vocab, BOS_ID, EOS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::format::{format_of_sample, spec_to_symbols, FormatSpec, SlotPos, SymbolSequence};
use crate::model::{Model, ModelInput};
use crate::numerics::{softmax, Tensor};
use crate::phonetics::Lexicon;

/// Precision, recall and F1 from matched, produced and expected counts.
fn prf(matched: f64, produced: f64, expected: f64) -> (f64, f64, f64) {
    let p = if produced > 0.0 { matched / produced } else { 0.0 };
    let r = if expected > 0.0 { matched / expected } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FormatScores {
    pub ma_f1: f64,
    pub mi_f1: f64,
    /// Pooled precision.
    pub precision: f64,
    /// Pooled recall.
    pub recall: f64,
}

/// Sentence-level agreement between formats and outputs.
///
/// Sentences are aligned from the start. A pair matches when the lengths
/// differ by at most `delta` and, with `check_punct`, the punctuation tokens
/// are identical.
pub fn format_f1(
    specs: &[FormatSpec],
    outputs: &[Vec<Vec<String>>],
    delta: usize,
    check_punct: bool,
    punct: &PunctSet,
) -> FormatScores {
    let mut per_sample = Vec::with_capacity(specs.len());
    let (mut matched, mut produced, mut expected) = (0.0, 0.0, 0.0);
    for (spec, out) in specs.iter().zip(outputs) {
        let spec_punct = spec.line_punct();
        let n_prime = spec
            .lines
            .iter()
            .zip(&spec_punct)
            .zip(out)
            .filter(|((want, want_p), got)| {
                let len_ok = want.len().abs_diff(got.len()) <= delta;
                let got_p: Vec<&str> = got.iter().map(String::as_str).filter(|t| punct.is_punct(t)).collect();
                len_ok && (!check_punct || **want_p == got_p)
            })
            .count() as f64;
        let (n, m) = (out.len() as f64, spec.lines.len() as f64);
        per_sample.push(prf(n_prime, n, m).2);
        matched += n_prime;
        produced += n;
        expected += m;
    }
    let (precision, recall, mi_f1) = prf(matched, produced, expected);
    FormatScores {
        ma_f1: mean(&per_sample),
        mi_f1,
        precision,
        recall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RhymeScores {
    pub ma_f1: f64,
    pub mi_f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Correct, produced and expected slot counts for one rhyme group.
pub fn rhyme_group_counts(group: &[SlotPos], output: &[Vec<String>], lex: &Lexicon) -> (usize, usize, usize) {
    let words: Vec<&str> = group
        .iter()
        .filter_map(|&(l, i)| output.get(l).and_then(|line| line.get(i)).map(String::as_str))
        .collect();
    let units: Vec<Option<Vec<String>>> = words.iter().map(|w| lex.rhyme_units(w)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for u in units.iter().flatten() {
        for unit in u.iter().collect::<HashSet<_>>() {
            *counts.entry(unit.as_str()).or_default() += 1;
        }
    }
    // Highest count wins; BTreeMap order breaks ties toward the smaller unit.
    let modal = counts
        .iter()
        .fold(None::<(&str, usize)>, |best, (&u, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((u, c)),
        })
        .filter(|&(_, c)| c >= 2)
        .map(|(u, _)| u);
    let correct = match modal {
        Some(m) => units.iter().flatten().filter(|u| u.iter().any(|x| x == m)).count(),
        None => 0,
    };
    (correct, words.len(), group.len())
}

/// Rhyme agreement within each group of slots.
///
/// The reference unit of a group is the most common unit among its produced
/// words, provided at least two words share it. Out-of-vocabulary words never
/// count as correct.
pub fn rhyme_f1(groups: &[Vec<Vec<SlotPos>>], outputs: &[Vec<Vec<String>>], lex: &Lexicon) -> RhymeScores {
    let mut per_sample = Vec::new();
    let (mut c, mut p, mut e) = (0usize, 0usize, 0usize);
    for (sample_groups, out) in groups.iter().zip(outputs) {
        let (mut sc, mut sp, mut se) = (0, 0, 0);
        for g in sample_groups {
            let (a, b, d) = rhyme_group_counts(g, out, lex);
            sc += a;
            sp += b;
            se += d;
        }
        if se > 0 {
            per_sample.push(prf(sc as f64, sp as f64, se as f64).2);
        }
        c += sc;
        p += sp;
        e += se;
    }
    let (precision, recall, mi_f1) = prf(c as f64, p as f64, e as f64);
    RhymeScores {
        ma_f1: mean(&per_sample),
        mi_f1,
        precision,
        recall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distinct {
    pub ma_d1: f64,
    pub mi_d1: f64,
    pub ma_d2: f64,
    pub mi_d2: f64,
}

/// Distinct-n: per-sample means and corpus-pooled ratios of unique n-grams.
pub fn distinct(samples: &[Vec<String>]) -> Distinct {
    let score = |n: usize| -> (f64, f64) {
        let mut per = Vec::new();
        let mut pooled: HashSet<&[String]> = HashSet::new();
        let mut total = 0usize;
        for s in samples {
            if s.len() < n {
                continue;
            }
            let grams: Vec<&[String]> = s.windows(n).collect();
            let uniq: HashSet<&[String]> = grams.iter().copied().collect();
            per.push(uniq.len() as f64 / grams.len() as f64);
            total += grams.len();
            pooled.extend(uniq);
        }
        let micro = if total == 0 { 0.0 } else { pooled.len() as f64 / total as f64 };
        (mean(&per), micro)
    };
    let (ma_d1, mi_d1) = score(1);
    let (ma_d2, mi_d2) = score(2);
    Distinct {
        ma_d1,
        mi_d1,
        ma_d2,
        mi_d2,
    }
}

/// Tokens of a sample with line structure removed.
pub fn flatten(lines: &[Vec<String>]) -> Vec<String> {
    lines.iter().flatten().cloned().collect()
}

/// Perplexity of `model` on `seqs`.
pub fn ppl(model: &Model, seqs: &[SymbolSequence]) -> Result<f64> {
    crate::training::perplexity(model, seqs, 32)
}

/// `2^(-(1/|Y|) Σ log2 p)` over the sentence-final probabilities of one sample.
pub fn integrity_of(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return f64::NAN;
    }
    let mean_log = probs.iter().map(|p| p.log2()).sum::<f64>() / probs.len() as f64;
    (-mean_log).exp2()
}

/// Probability of each sentence's final token given everything before it.
pub trait SentenceScorer {
    fn final_token_probs(&self, sample: &[Vec<String>]) -> Result<Vec<f64>>;
}

/// Scores with a language model, feeding it the sample's own format.
pub struct LmScorer<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub punct: PunctSet,
}

impl SentenceScorer for LmScorer<'_> {
    fn final_token_probs(&self, sample: &[Vec<String>]) -> Result<Vec<f64>> {
        let lines: Vec<Vec<String>> = sample.iter().filter(|l| !l.is_empty()).cloned().collect();
        if lines.is_empty() {
            return Ok(vec![]);
        }
        let spec = format_of_sample(&crate::corpus::Sample { lines: lines.clone() }, &BTreeMap::new(), &self.punct);
        let mut sc = self.model.config.symbol_config();
        sc.punct = self.punct.clone();
        let fmt = spec_to_symbols(&spec, self.vocab, &sc).or_else(|e| match e {
            // Out-of-vocabulary punctuation is scored as `<unk>`.
            Error::UnknownFixedTokens { .. } => {
                let general = FormatSpec {
                    lines: spec.lines.iter().map(|l| vec![crate::format::Slot::General; l.len()]).collect(),
                };
                spec_to_symbols(&general, self.vocab, &sc)
            }
            e => Err(e),
        })?;
        let mut y: Vec<TokenId> = Vec::new();
        let mut finals = Vec::new();
        for line in &lines {
            y.extend(self.vocab.encode(line));
            finals.push(y.len() - 1);
            y.push(SEP_ID);
        }
        y.push(EOS_ID);
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(&y[..y.len() - 1]);
        let logits = self.model.logits(&ModelInput::single(&inputs, &fmt.streams)?)?;
        finals
            .iter()
            .map(|&t| {
                let row = Tensor::new(vec![logits.shape()[1]], logits.row(t).to_vec())?;
                Ok(softmax(&row, 0)?.data()[y[t]] as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Integrity {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of per-sample integrity.
pub fn integrity<S: SentenceScorer + ?Sized>(scorer: &S, outputs: &[Vec<Vec<String>>]) -> Result<Integrity> {
    let mut vals = Vec::new();
    for out in outputs {
        let probs = scorer.final_token_probs(out)?;
        if !probs.is_empty() {
            vals.push(integrity_of(&probs));
        }
    }
    let m = mean(&vals);
    let var = mean(&vals.iter().map(|v| (v - m).powi(2)).collect::<Vec<_>>());
    Ok(Integrity { mean: m, std: var.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub ma_d1: f64,
    pub mi_d1: f64,
    pub ma_d2: f64,
    pub mi_d2: f64,
    pub format_ma_f1: f64,
    pub format_mi_f1: f64,
    pub format_precision: f64,
    pub format_recall: f64,
    pub rhyme_ma_f1: f64,
    pub rhyme_mi_f1: f64,
    pub integrity_mean: f64,
    pub integrity_std: f64,
}

impl EvalReport {
    pub fn new(ppl: f64, d: Distinct, f: FormatScores, r: RhymeScores, i: Integrity) -> Self {
        Self {
            ppl,
            ma_d1: d.ma_d1,
            mi_d1: d.mi_d1,
            ma_d2: d.ma_d2,
            mi_d2: d.mi_d2,
            format_ma_f1: f.ma_f1,
            format_mi_f1: f.mi_f1,
            format_precision: f.precision,
            format_recall: f.recall,
            rhyme_ma_f1: r.ma_f1,
            rhyme_mi_f1: r.mi_f1,
            integrity_mean: i.mean,
            integrity_std: i.std,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Key/value pairs in declaration order.
    pub fn to_kv(&self) -> Vec<(&'static str, f64)> {
        let v = serde_json::to_value(self).expect("report serializes");
        let map = v.as_object().expect("object");
        FIELDS.iter().map(|&k| (k, map[k].as_f64().unwrap_or(f64::NAN))).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map: HashMap<&str, f64> = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad report line `{line}`")))?;
            let v = v.trim().parse().map_err(|_| Error::Config(format!("bad value in `{line}`")))?;
            map.insert(k.trim(), v);
        }
        let obj: serde_json::Map<String, serde_json::Value> = FIELDS
            .iter()
            .map(|&k| {
                let v = map.get(k).ok_or_else(|| Error::Config(format!("report lacks `{k}`")))?;
                Ok((k.to_string(), serde_json::json!(v)))
            })
            .collect::<Result<_>>()?;
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))
    }
}

pub const FIELDS: [&str; 13] = [
    "ppl",
    "ma_d1",
    "mi_d1",
    "ma_d2",
    "mi_d2",
    "format_ma_f1",
    "format_mi_f1",
    "format_precision",
    "format_recall",
    "rhyme_ma_f1",
    "rhyme_mi_f1",
    "integrity_mean",
    "integrity_std",
];

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
