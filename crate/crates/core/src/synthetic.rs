//! A small templated corpus with fixed line-length patterns and rhyming word families.
//!
//! Every sample picks a pattern (line lengths plus rhyme scheme), a theme and
//! one rhyme family per scheme letter. Filler words depend only on the theme
//! and on the distance from the end of the line, so intra-line positions
//! carry most of the information a model needs. The first word of a sample is
//! an opener drawn from a Zipf-weighted pool, which gives the corpus one
//! long-tailed choice per sample.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PunctSet, Sample};
use crate::format::{format_of_sample, FormatSpec, SlotPos};

/// Word counts per line (punctuation excluded) and rhyme scheme.
pub const PATTERNS: [(&[usize], &str); 4] = [
    (&[6, 8, 6, 8], "ABAB"),
    (&[7, 7, 5, 5], "AABB"),
    (&[5, 7, 7, 5], "ABBA"),
    (&[8, 6, 6, 8], "AABB"),
];

/// Fillers in reading order for the longest line; shorter lines use a suffix.
pub const THEMES: [[&str; 7]; 4] = [
    ["beyond", "those", "cold", "waves", "still", "drift", "toward"],
    ["beneath", "tall", "green", "pines", "softly", "whisper", "about"],
    ["across", "these", "loud", "streets", "people", "hurry", "past"],
    ["above", "high", "silent", "peaks", "eagles", "circle", "over"],
];

pub const FAMILIES: [&[&str]; 5] = [
    &["night", "light", "bright", "sight"],
    &["day", "way", "stay", "gray"],
    &["sleep", "deep", "keep", "steep"],
    &["shore", "more", "door", "floor"],
    &["rain", "pain", "plain", "chain"],
];

/// First words of a sample; the word at rank r has weight 1/(r+1).
pub const OPENERS: [&str; 60] = [
    "and", "so", "then", "now", "yet", "oh", "ah", "lo", "but", "for", "while", "when", "as", "if", "though",
    "once", "here", "there", "soon", "again", "alas", "behold", "hark", "sweet", "dear", "long", "far", "all",
    "slow", "swift", "fair", "bold", "brave", "pale", "grim", "wild", "lone", "faint", "proud", "meek", "vast",
    "dim", "calm", "warm", "bare", "thin", "kind", "true", "wise", "old", "young", "late", "early", "ever",
    "never", "always", "often", "seldom", "quietly", "gently",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub pattern: usize,
    pub theme: usize,
    /// Rhyme groups in scheme-letter order.
    pub groups: Vec<Vec<SlotPos>>,
}

impl SyntheticSample {
    pub fn format(&self) -> FormatSpec {
        format_of_sample(&self.sample, &crate::format::rhyme_map(&self.groups), &PunctSet::default())
    }
}

/// Rhyme groups of a pattern: line-final word slots sharing a scheme letter.
pub fn pattern_groups(pattern: usize) -> Vec<Vec<SlotPos>> {
    let (lens, scheme) = PATTERNS[pattern];
    let mut by_letter: BTreeMap<char, Vec<SlotPos>> = BTreeMap::new();
    for (i, letter) in scheme.chars().enumerate() {
        by_letter.entry(letter).or_default().push((i, lens[i] - 1));
    }
    by_letter.into_values().collect()
}

pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R) -> SyntheticSample {
    let pattern = rng.random_range(0..PATTERNS.len());
    let theme = rng.random_range(0..THEMES.len());
    let (lens, scheme) = PATTERNS[pattern];
    let mut families: Vec<usize> = (0..FAMILIES.len()).collect();
    families.shuffle(rng);
    let mut letters: BTreeMap<char, usize> = BTreeMap::new();
    let n_lines = lens.len();
    let zipf = WeightedIndex::new((0..OPENERS.len()).map(|r| 1.0 / (r + 1) as f64)).expect("positive weights");
    let opener = OPENERS[zipf.sample(rng)];
    let lines = lens
        .iter()
        .zip(scheme.chars())
        .enumerate()
        .map(|(i, (&n, letter))| {
            let next = letters.len();
            let fam = *letters.entry(letter).or_insert(families[next]);
            let fillers = &THEMES[theme][THEMES[theme].len() + 1 - n..];
            let mut line: Vec<String> = fillers.iter().map(|s| s.to_string()).collect();
            if i == 0 {
                line[0] = opener.to_string();
            }
            line.push(FAMILIES[fam].choose(rng).expect("non-empty family").to_string());
            line.push(if i + 1 == n_lines { "." } else { "," }.to_string());
            line
        })
        .collect();
    SyntheticSample {
        sample: Sample::new(lines).expect("templated lines are valid"),
        pattern,
        theme,
        groups: pattern_groups(pattern),
    }
}

/// `n` samples from a seeded stream.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_sample(&mut rng)).collect()
}
