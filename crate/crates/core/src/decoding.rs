//! Format-conditioned decoding: truncated top-k sampling, beam search and polishing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PunctSet, TokenId, Vocab, BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::format::{rebuild_format, spec_to_symbols, CompiledFormat, FormatSpec, PositionRule, SlotPos};
use crate::model::{Model, ModelInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    TopK,
    Beam,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Self::TopK),
            "beam" => Ok(Self::Beam),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub beam_width: usize,
    /// Exponent of the length normalization applied to beam scores.
    pub length_alpha: f64,
    /// Cap on emitted tokens; the format length when `None`.
    pub max_len: Option<usize>,
    pub hard_constrain: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopK,
            k: 32,
            temperature: 1.0,
            beam_width: 5,
            length_alpha: 1.0,
            max_len: None,
            hard_constrain: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that scores the next token of partial sequences under a format.
pub trait NextToken {
    fn vocab_size(&self) -> usize;

    /// Logits for the token after each prefix. Prefixes start with `<bos>`.
    fn next_logits(&self, items: &[(&CompiledFormat, &[TokenId])]) -> Result<Vec<Vec<f32>>>;
}

impl NextToken for Model<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_logits(&self, items: &[(&CompiledFormat, &[TokenId])]) -> Result<Vec<Vec<f32>>> {
        let reveals: Vec<Vec<Option<TokenId>>> = items.iter().map(|(f, _)| f.reveals()).collect();
        let rows: Vec<_> = items
            .iter()
            .zip(&reveals)
            .map(|((f, prefix), r)| (*prefix, &f.streams, r.as_slice()))
            .collect();
        let logits = self.last_logits(&ModelInput::new(&rows)?)?;
        Ok((0..items.len()).map(|i| logits.row(i).to_vec()).collect())
    }
}

/// Marks vocabulary entries that are punctuation.
pub fn punct_mask(vocab: &Vocab, punct: &PunctSet) -> Vec<bool> {
    vocab.tokens().iter().map(|t| punct.is_punct(t)).collect()
}

/// Sets the logits of tokens that may not appear at `pos` to `-inf`.
///
/// Fixed slots are forced in both modes. Without hard constraints only the
/// final position is also forced (to `<eos>`), and `<eos>` is barred while a
/// fixed slot lies ahead; with them, punctuation and
/// separators are forced too, and free slots exclude reserved markers and
/// punctuation.
pub fn constrain(logits: &mut [f32], format: &CompiledFormat, pos: usize, hard: bool, punct: &[bool]) {
    let force = |logits: &mut [f32], id: TokenId| {
        for (i, x) in logits.iter_mut().enumerate() {
            if i != id {
                *x = f32::NEG_INFINITY;
            }
        }
    };
    let rule = format.rules.get(pos).copied().unwrap_or(PositionRule::Eos);
    let last = pos + 1 >= format.rules.len();
    for id in [PAD_ID, BOS_ID, UNK_ID] {
        if let Some(x) = logits.get_mut(id) {
            *x = f32::NEG_INFINITY;
        }
    }
    match (rule, hard) {
        (PositionRule::Fixed(id), _) => force(logits, id),
        (_, false) if last => force(logits, EOS_ID),
        (_, false) => {
            // Stopping early would skip a fixed token still ahead.
            if format.fixed.keys().next_back().is_some_and(|&f| f > pos) {
                logits[EOS_ID] = f32::NEG_INFINITY;
            }
        }
        (PositionRule::Punct(id), true) => force(logits, id),
        (PositionRule::Sep, true) => force(logits, SEP_ID),
        (PositionRule::Eos, true) => force(logits, EOS_ID),
        (PositionRule::Free, true) => {
            for (i, x) in logits.iter_mut().enumerate() {
                if i == SEP_ID || i == EOS_ID || punct.get(i).copied().unwrap_or(false) {
                    *x = f32::NEG_INFINITY;
                }
            }
        }
    }
}

/// Candidates sorted by descending logit, ties by lower id, with `-inf` dropped.
fn ranked(logits: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] > f32::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// Probabilities of the `k` best tokens after temperature scaling, renormalized.
pub fn top_k_distribution(logits: &[f32], k: usize, temperature: f64) -> Result<Vec<(TokenId, f64)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let order = ranked(logits);
    let kept = &order[..k.min(order.len())];
    let Some(&best) = kept.first() else {
        return Err(Error::NoCandidates(0));
    };
    let max = logits[best] as f64 / temperature;
    let weights: Vec<f64> = kept.iter().map(|&i| (logits[i] as f64 / temperature - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(kept.iter().zip(weights).map(|(&i, w)| (i, w / z)).collect())
}

/// Inverse-CDF draw from the top-k distribution with the uniform `u ∈ [0, 1)`.
pub fn top_k_pick(logits: &[f32], k: usize, temperature: f64, u: f64) -> Result<TokenId> {
    let dist = top_k_distribution(logits, k, temperature)?;
    let mut acc = 0.0;
    for &(id, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(dist.last().expect("non-empty").0)
}

pub fn top_k_sample<R: Rng + ?Sized>(logits: &[f32], k: usize, temperature: f64, rng: &mut R) -> Result<TokenId> {
    top_k_pick(logits, k, temperature, rng.random::<f64>())
}

/// One sampling job: a format and the seed of its private random stream.
#[derive(Debug, Clone)]
pub struct Job<'a> {
    pub format: &'a CompiledFormat,
    pub seed: u64,
}

/// Samples every job with truncated top-k, batching the model calls.
///
/// Each job draws exactly one uniform per position, so runs that differ only
/// in `k` or temperature share their randomness.
pub fn sample_many<M: NextToken + ?Sized>(
    model: &M,
    jobs: &[Job<'_>],
    cfg: &DecodeConfig,
    punct: &[bool],
) -> Result<Vec<Vec<TokenId>>> {
    cfg.validate()?;
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| ChaCha8Rng::seed_from_u64(j.seed)).collect();
    let mut prefixes: Vec<Vec<TokenId>> = vec![vec![BOS_ID]; jobs.len()];
    let limits: Vec<usize> = jobs
        .iter()
        .map(|j| cfg.max_len.unwrap_or(usize::MAX).min(j.format.rules.len()))
        .collect();
    let mut active: Vec<usize> = (0..jobs.len()).filter(|&i| limits[i] > 0).collect();
    while !active.is_empty() {
        let items: Vec<_> = active.iter().map(|&i| (jobs[i].format, prefixes[i].as_slice())).collect();
        let rows = model.next_logits(&items)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, mut row) in active.iter().zip(rows) {
            let pos = prefixes[i].len() - 1;
            constrain(&mut row, jobs[i].format, pos, cfg.hard_constrain, punct);
            let u: f64 = rngs[i].random();
            let id = top_k_pick(&row, cfg.k, cfg.temperature, u).map_err(|e| match e {
                Error::NoCandidates(_) => Error::NoCandidates(pos),
                e => e,
            })?;
            prefixes[i].push(id);
            if id != EOS_ID && prefixes[i].len() - 1 < limits[i] {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(prefixes.into_iter().map(|mut p| p.split_off(1)).collect())
}

/// Log-softmax over the finite entries.
fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let lz = max + z.ln();
    logits.iter().map(|&x| x as f64 - lz).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub score: f64,
}

/// Beam search under the format constraints.
///
/// Each step keeps the `beam_width` highest-probability extensions (ties by
/// lower token sequence). Hypotheses that emit `<eos>` or reach the length cap
/// leave the beam. The winner has the highest `log_prob / len^alpha`; ties go
/// to the lower token sequence, then to the earlier completion.
pub fn beam_search<M: NextToken + ?Sized>(
    model: &M,
    format: &CompiledFormat,
    cfg: &DecodeConfig,
    punct: &[bool],
) -> Result<Hypothesis> {
    cfg.validate()?;
    let limit = cfg.max_len.unwrap_or(usize::MAX).min(format.rules.len());
    if limit == 0 {
        return Err(Error::Config("nothing to decode".into()));
    }
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(vec![], 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    while !live.is_empty() {
        let prefixes: Vec<Vec<TokenId>> = live
            .iter()
            .map(|(t, _)| std::iter::once(BOS_ID).chain(t.iter().copied()).collect())
            .collect();
        let items: Vec<_> = prefixes.iter().map(|p| (format, p.as_slice())).collect();
        let rows = model.next_logits(&items)?;
        let mut cands: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for ((tokens, lp), mut row) in live.iter().zip(rows) {
            let pos = tokens.len();
            constrain(&mut row, format, pos, cfg.hard_constrain, punct);
            if row.iter().all(|&x| x == f32::NEG_INFINITY) {
                return Err(Error::NoCandidates(pos));
            }
            let logp = log_softmax(&row);
            for (id, &l) in logp.iter().enumerate() {
                if row[id] > f32::NEG_INFINITY {
                    let mut t = tokens.clone();
                    t.push(id);
                    cands.push((t, lp + l));
                }
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(cfg.beam_width);
        live.clear();
        for (t, lp) in cands {
            if t.last() == Some(&EOS_ID) || t.len() >= limit {
                finished.push((t, lp));
            } else {
                live.push((t, lp));
            }
        }
    }
    let norm = |t: &[TokenId], lp: f64| lp / (t.len() as f64).powf(cfg.length_alpha);
    let best = finished
        .into_iter()
        .map(|(t, lp)| {
            let score = norm(&t, lp);
            Hypothesis {
                tokens: t,
                log_prob: lp,
                score,
            }
        })
        .reduce(|best, h| match h.score.total_cmp(&best.score) {
            Ordering::Greater => h,
            Ordering::Equal if h.tokens < best.tokens => h,
            _ => best,
        })
        .expect("beam search always finishes a hypothesis");
    Ok(best)
}

/// Decodes one format with the configured strategy.
pub fn generate<M: NextToken + ?Sized>(
    model: &M,
    format: &CompiledFormat,
    cfg: &DecodeConfig,
    punct: &[bool],
) -> Result<Vec<TokenId>> {
    match cfg.strategy {
        Strategy::TopK => Ok(sample_many(model, &[Job { format, seed: cfg.seed }], cfg, punct)?.remove(0)),
        Strategy::Beam => Ok(beam_search(model, format, cfg, punct)?.tokens),
    }
}

/// Splits decoded ids into lines at `</s>`, stopping at `<eos>`.
pub fn to_lines(tokens: &[TokenId], vocab: &Vocab) -> Vec<Vec<String>> {
    let mut lines = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for &id in tokens {
        match id {
            EOS_ID => break,
            SEP_ID => lines.push(std::mem::take(&mut cur)),
            _ => cur.push(vocab.token(id).unwrap_or(crate::corpus::UNK).to_string()),
        }
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    lines
}

/// Lines joined by spaces, with ` / ` between lines.
pub fn render_lines(lines: &[Vec<String>]) -> String {
    lines.iter().map(|l| l.join(" ")).collect::<Vec<_>>().join(" / ")
}

/// Everything needed to turn formats into text with one model.
pub struct Generator<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub punct: PunctSet,
    mask: Vec<bool>,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab, punct: PunctSet) -> Self {
        let mask = punct_mask(vocab, &punct);
        Self {
            model,
            vocab,
            punct,
            mask,
        }
    }

    pub fn punct_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn compile(&self, spec: &FormatSpec) -> Result<CompiledFormat> {
        let mut sc = self.model.config.symbol_config();
        sc.punct = self.punct.clone();
        spec_to_symbols(spec, self.vocab, &sc)
    }

    pub fn generate(&self, spec: &FormatSpec, cfg: &DecodeConfig) -> Result<Vec<Vec<String>>> {
        let f = self.compile(spec)?;
        Ok(to_lines(&generate(self.model, &f, cfg, &self.mask)?, self.vocab))
    }

    /// Top-k samples for many formats; job `i` uses seed `cfg.seed + i`.
    pub fn sample_all(&self, specs: &[FormatSpec], cfg: &DecodeConfig) -> Result<Vec<Vec<Vec<String>>>> {
        let formats = specs.iter().map(|s| self.compile(s)).collect::<Result<Vec<_>>>()?;
        let jobs: Vec<Job<'_>> = formats
            .iter()
            .enumerate()
            .map(|(i, format)| Job {
                format,
                seed: cfg.seed.wrapping_add(i as u64),
            })
            .collect();
        let out = sample_many(self.model, &jobs, cfg, &self.mask)?;
        Ok(out.iter().map(|t| to_lines(t, self.vocab)).collect())
    }

    /// Regenerates `prev` keeping the tokens at the locked stream indices.
    ///
    /// The skeleton of `prev` is reused as a hard constraint, so locking every
    /// position returns `prev` unchanged.
    pub fn polish(
        &self,
        prev: &[Vec<String>],
        lock: &BTreeSet<usize>,
        rhyme_slots: &BTreeMap<SlotPos, String>,
        cfg: &DecodeConfig,
    ) -> Result<Vec<Vec<String>>> {
        let spec = rebuild_format(prev, lock, rhyme_slots, &self.punct)?;
        let cfg = DecodeConfig {
            hard_constrain: true,
            ..cfg.clone()
        };
        self.generate(&spec, &cfg)
    }
}
