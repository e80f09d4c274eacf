//! Pronunciation lookup and rhyme units for English and Chinese.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::corpus::{PunctSet, Sample};
use crate::error::{Error, Result};
use crate::format::SlotPos;

const BUNDLED_CMUDICT: &str = include_str!("../data/cmudict-mini.txt");
const BUNDLED_PINYIN: &str = include_str!("../data/pinyin-mini.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lang {
    En,
    Zh,
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Self::En),
            "zh" => Ok(Self::Zh),
            _ => Err(Error::Config(format!("unknown language `{s}` (expected en or zh)"))),
        }
    }
}

/// Word → pronunciation variants in cmudict notation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CmuDict {
    entries: HashMap<String, Vec<Vec<String>>>,
    /// Malformed lines skipped while parsing.
    pub skipped: usize,
}

impl CmuDict {
    pub fn parse(text: &str) -> Self {
        let mut dict = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(head), phones) = (parts.next(), parts.map(str::to_string).collect::<Vec<_>>()) else {
                continue;
            };
            let word = match head.find('(') {
                Some(i) if head.ends_with(')') => &head[..i],
                _ => head,
            };
            if phones.is_empty() || word.is_empty() {
                dict.skipped += 1;
                continue;
            }
            dict.entries.entry(word.to_lowercase()).or_default().push(phones);
        }
        if dict.skipped > 0 {
            warn!("skipped {} malformed pronunciation lines", dict.skipped);
        }
        dict
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_CMUDICT)
    }

    /// Case-insensitive lookup of every pronunciation variant.
    pub fn get(&self, word: &str) -> Option<&[Vec<String>]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn is_vowel(phone: &str) -> bool {
    phone.ends_with(|c: char| c.is_ascii_digit())
}

/// Phonemes from the last stressed vowel (stress 1 or 2) to the end; the
/// last vowel of any stress when none is stressed.
pub fn rhyme_suffix(phones: &[String]) -> Vec<String> {
    let stressed = phones.iter().rposition(|p| p.ends_with('1') || p.ends_with('2'));
    match stressed.or_else(|| phones.iter().rposition(|p| is_vowel(p))) {
        Some(i) => phones[i..].to_vec(),
        None => phones.to_vec(),
    }
}

/// Rhyme unit of the first pronunciation of `word`.
pub fn rhyme_unit_en(word: &str, lex: &CmuDict) -> Option<Vec<String>> {
    lex.get(word).map(|v| rhyme_suffix(&v[0]))
}

fn strip_stress(phones: &[String]) -> String {
    phones
        .iter()
        .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Character → pinyin syllables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PinyinTable {
    entries: HashMap<String, Vec<String>>,
    pub skipped: usize,
}

impl PinyinTable {
    /// Parses `char<TAB>pinyin` lines; several readings may be listed, separated by spaces or commas.
    pub fn parse(text: &str) -> Self {
        let mut table = Self::default();
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('\t') {
                Some((ch, py)) if !ch.trim().is_empty() && !py.trim().is_empty() => {
                    let readings = py.split([' ', ',']).filter(|s| !s.is_empty()).map(str::to_string);
                    table.entries.entry(ch.trim().to_string()).or_default().extend(readings);
                }
                _ => table.skipped += 1,
            }
        }
        if table.skipped > 0 {
            warn!("skipped {} malformed pinyin lines", table.skipped);
        }
        table
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_PINYIN)
    }

    pub fn get(&self, ch: &str) -> Option<&[String]> {
        self.entries.get(ch).map(Vec::as_slice)
    }
}

/// Removes tone digits and tone marks, lowercases, and writes `ü`/`v` as `u`.
fn plain_syllable(syllable: &str) -> String {
    syllable
        .chars()
        .filter(|c| !c.is_ascii_digit())
        .flat_map(char::to_lowercase)
        .map(|c| match c {
            'ā' | 'á' | 'ǎ' | 'à' => 'a',
            'ē' | 'é' | 'ě' | 'è' => 'e',
            'ī' | 'í' | 'ǐ' | 'ì' => 'i',
            'ō' | 'ó' | 'ǒ' | 'ò' => 'o',
            'ū' | 'ú' | 'ǔ' | 'ù' => 'u',
            'ǖ' | 'ǘ' | 'ǚ' | 'ǜ' | 'ü' | 'v' => 'u',
            c => c,
        })
        .collect()
}

const INITIALS: [&str; 21] = [
    "zh", "ch", "sh", "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "r", "z", "c", "s",
];

/// The tone-free final of a pinyin syllable, with `y`/`w` spellings restored.
pub fn pinyin_final(syllable: &str) -> String {
    let s = plain_syllable(syllable);
    if let Some(rest) = s.strip_prefix('y') {
        return match rest {
            r if r.starts_with('i') || r.starts_with('u') => r.to_string(),
            r => format!("i{r}"),
        };
    }
    if let Some(rest) = s.strip_prefix('w') {
        return match rest {
            "u" => "u".to_string(),
            r => format!("u{r}"),
        };
    }
    for ini in INITIALS {
        if let Some(rest) = s.strip_prefix(ini) {
            if !rest.is_empty() {
                return rest.to_string();
            }
        }
    }
    s
}

/// Rhyme unit of the first reading of `ch`.
pub fn rhyme_unit_zh(ch: &str, lex: &PinyinTable) -> Option<String> {
    lex.get(ch).map(|r| pinyin_final(&r[0]))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lexicon {
    En(CmuDict),
    Zh(PinyinTable),
}

impl Lexicon {
    pub fn bundled(lang: Lang) -> Self {
        match lang {
            Lang::En => Self::En(CmuDict::bundled()),
            Lang::Zh => Self::Zh(PinyinTable::bundled()),
        }
    }

    pub fn load(lang: Lang, path: impl AsRef<Path>) -> Result<Self> {
        Ok(match lang {
            Lang::En => Self::En(CmuDict::load(path)?),
            Lang::Zh => Self::Zh(PinyinTable::load(path)?),
        })
    }

    /// Comparable rhyme units of every pronunciation; `None` when out of vocabulary.
    pub fn rhyme_units(&self, word: &str) -> Option<Vec<String>> {
        let mut units: Vec<String> = match self {
            Self::En(d) => d.get(word)?.iter().map(|p| strip_stress(&rhyme_suffix(p))).collect(),
            Self::Zh(t) => t.get(word)?.iter().map(|s| pinyin_final(s)).collect(),
        };
        units.dedup();
        Some(units)
    }

    /// Whether any pronunciations of `a` and `b` share a rhyme unit; `None` if either is unknown.
    pub fn rhymes(&self, a: &str, b: &str) -> Option<bool> {
        let (ua, ub) = (self.rhyme_units(a)?, self.rhyme_units(b)?);
        Some(ua.iter().any(|u| ub.contains(u)))
    }

    /// Longest shared phoneme (or pinyin letter) suffix over all pronunciation pairs.
    pub fn overlap(&self, a: &str, b: &str) -> Option<usize> {
        let seqs = |w: &str| -> Option<Vec<Vec<String>>> {
            Some(match self {
                Self::En(d) => d
                    .get(w)?
                    .iter()
                    .map(|p| p.iter().map(|x| x.trim_end_matches(|c: char| c.is_ascii_digit()).to_string()).collect())
                    .collect(),
                Self::Zh(t) => t
                    .get(w)?
                    .iter()
                    .map(|s| plain_syllable(s).chars().map(String::from).collect())
                    .collect(),
            })
        };
        let (sa, sb) = (seqs(a)?, seqs(b)?);
        let common = |x: &[String], y: &[String]| x.iter().rev().zip(y.iter().rev()).take_while(|(p, q)| p == q).count();
        sa.iter().flat_map(|x| sb.iter().map(move |y| common(x, y))).max()
    }
}

/// Line-final words grouped by shared rhyme unit.
///
/// The last non-punctuation token of each line is looked up; lines whose
/// words share a unit with at least one other line form a group. Groups are
/// ordered by their first line; a word with several pronunciations joins the
/// group of its first unit that is shared.
pub fn annotate_rhymes(sample: &Sample, lex: &Lexicon, punct: &PunctSet) -> Vec<Vec<SlotPos>> {
    let ends: Vec<(SlotPos, Vec<String>)> = sample
        .lines
        .iter()
        .enumerate()
        .filter_map(|(i, line)| {
            let j = line.iter().rposition(|t| !punct.is_punct(t))?;
            Some(((i, j), lex.rhyme_units(&line[j])?))
        })
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (_, units) in &ends {
        for u in units.iter().collect::<BTreeSet<_>>() {
            *counts.entry(u.as_str()).or_default() += 1;
        }
    }
    let mut groups: BTreeMap<String, Vec<SlotPos>> = BTreeMap::new();
    for (pos, units) in &ends {
        if let Some(u) = units.iter().find(|u| counts[u.as_str()] >= 2) {
            groups.entry(u.clone()).or_default().push(*pos);
        }
    }
    let mut out: Vec<Vec<SlotPos>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    out.sort_by_key(|g| g[0]);
    out
}
