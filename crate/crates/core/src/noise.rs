//! Token-level synthetic noise: adjacent swaps, Cambridge-style interior
//! permutations, character substitution tables (confusables, l33tspeak) and
//! combining-mark insertion.
//!
//! A token is a maximal run of non-whitespace. Each token is selected with
//! probability `p`; a selected token is transformed only if it is eligible
//! for the noise kind, and left untouched otherwise.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Swap,
    Cambridge,
    MapChars,
    Marks,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Swap => "swap",
            NoiseKind::Cambridge => "cambridge",
            NoiseKind::MapChars => "mapchars",
            NoiseKind::Marks => "marks",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swap" => Ok(NoiseKind::Swap),
            "cambridge" | "cam" => Ok(NoiseKind::Cambridge),
            "mapchars" => Ok(NoiseKind::MapChars),
            "marks" => Ok(NoiseKind::Marks),
            other => Err(Error::invalid(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Character substitution table. A key may have several replacements, in
/// which case one is drawn uniformly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CharTable {
    map: BTreeMap<char, Vec<char>>,
}

const CYRILLIC_LATIN: &str = include_str!("../assets/tables/cyrillic_latin.tsv");
const L33T: &str = include_str!("../assets/tables/l33t.tsv");

impl CharTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses "FROM<TAB>TO" lines; blank lines and lines starting with `#`
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::parse(format!("table line {}: {msg}", lineno + 1));
            let (from, to) = line.split_once('\t').ok_or_else(|| err("expected FROM<TAB>TO"))?;
            let single = |s: &str| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(err("entries must be single codepoints")),
                }
            };
            table.insert(single(from)?, single(to)?)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cyrillic letters mapped to their Latin look-alikes (e.g. Я -> R).
    pub fn cyrillic_to_latin() -> Self {
        Self::parse(CYRILLIC_LATIN).expect("built-in table parses")
    }

    /// Latin letters mapped to Cyrillic look-alikes.
    pub fn latin_to_cyrillic() -> Self {
        Self::cyrillic_to_latin().inverted()
    }

    pub fn l33t() -> Self {
        Self::parse(L33T).expect("built-in table parses")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "cyrillic-latin" => Ok(Self::cyrillic_to_latin()),
            "latin-cyrillic" => Ok(Self::latin_to_cyrillic()),
            "l33t" => Ok(Self::l33t()),
            other => Err(Error::invalid(format!("unknown built-in table `{other}`"))),
        }
    }

    pub fn insert(&mut self, from: char, to: char) -> Result<()> {
        if from == to {
            return Err(Error::invalid(format!("table maps `{from}` to itself")));
        }
        let slot = self.map.entry(from).or_default();
        if !slot.contains(&to) {
            slot.push(to);
        }
        Ok(())
    }

    pub fn get(&self, c: char) -> Option<&[char]> {
        self.map.get(&c).map(Vec::as_slice)
    }

    pub fn contains(&self, c: char) -> bool {
        self.map.contains_key(&c)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.values().map(Vec::len).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (char, char)> + '_ {
        self.map.iter().flat_map(|(&k, vs)| vs.iter().map(move |&v| (k, v)))
    }

    pub fn inverted(&self) -> Self {
        let mut out = Self::new();
        for (k, v) in self.pairs() {
            out.insert(v, k).expect("keys differ from values");
        }
        out
    }

    pub fn retain(&mut self, mut keep: impl FnMut(char, char) -> bool) {
        for (&k, vs) in self.map.iter_mut() {
            vs.retain(|&v| keep(k, v));
        }
        self.map.retain(|_, vs| !vs.is_empty());
    }

    pub fn to_tsv(&self) -> String {
        self.pairs().map(|(k, v)| format!("{k}\t{v}\n")).collect()
    }
}

/// Generic combining diacritics used when no mark list is given.
pub const DEFAULT_MARKS: &[char] = &['\u{0300}', '\u{0301}', '\u{0302}', '\u{0303}', '\u{0308}'];

/// Reads one combining mark per line (`#` comments allowed).
pub fn parse_marks(text: &str) -> Result<Vec<char>> {
    let mut marks = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.chars();
        match (it.next(), it.next()) {
            (Some(c), None) => marks.push(c),
            _ => return Err(Error::parse(format!("expected one mark per line, got `{line}`"))),
        }
    }
    Ok(marks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub p: f64,
    pub seed: u64,
    /// Substitution table for `MapChars`.
    pub table: CharTable,
    /// Mark inventory for `Marks`.
    pub marks: Vec<char>,
    /// Per-character probability inside a selected token (`MapChars`, `Marks`).
    pub char_p: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, p: f64, seed: u64) -> Self {
        Self {
            kind,
            p,
            seed,
            table: CharTable::new(),
            marks: DEFAULT_MARKS.to_vec(),
            char_p: 1.0,
        }
    }

    pub fn with_table(mut self, table: CharTable) -> Self {
        self.table = table;
        self
    }

    pub fn with_marks(mut self, marks: Vec<char>) -> Self {
        self.marks = marks;
        self
    }

    pub fn with_char_p(mut self, char_p: f64) -> Self {
        self.char_p = char_p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!("noise probability {} not in [0,1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.char_p) {
            return Err(Error::invalid(format!("char probability {} not in [0,1]", self.char_p)));
        }
        match self.kind {
            NoiseKind::MapChars if self.table.is_empty() => {
                Err(Error::invalid("mapchars noise requires a non-empty table"))
            }
            NoiseKind::Marks if self.marks.is_empty() => Err(Error::invalid("marks noise requires at least one mark")),
            _ => Ok(()),
        }
    }

    /// Whether a token can be transformed by this kind of noise.
    pub fn eligible(&self, token: &str) -> bool {
        let len = token.chars().count();
        match self.kind {
            NoiseKind::Swap => len >= 2,
            NoiseKind::Cambridge => len >= 4,
            NoiseKind::MapChars => token.chars().any(|c| self.table.contains(c)),
            NoiseKind::Marks => len >= 1,
        }
    }

    fn transform(&self, token: &str, rng: &mut Rng) -> String {
        match self.kind {
            NoiseKind::Swap => swap_word(token, rng),
            NoiseKind::Cambridge => cambridge_word(token, rng),
            NoiseKind::MapChars => map_chars(token, &self.table, rng, self.char_p),
            NoiseKind::Marks => insert_marks(token, &self.marks, rng, self.char_p),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub tokens_total: usize,
    pub tokens_eligible: usize,
    pub tokens_noised: usize,
    pub effective_rate: f64,
}

impl NoiseReport {
    fn finish(mut self) -> Self {
        self.effective_rate = if self.tokens_eligible == 0 {
            0.0
        } else {
            self.tokens_noised as f64 / self.tokens_eligible as f64
        };
        self
    }

    pub fn merge(self, other: NoiseReport) -> Self {
        NoiseReport {
            tokens_total: self.tokens_total + other.tokens_total,
            tokens_eligible: self.tokens_eligible + other.tokens_eligible,
            tokens_noised: self.tokens_noised + other.tokens_noised,
            effective_rate: 0.0,
        }
        .finish()
    }
}

/// Noises a single sentence, using sub-stream 0 of the spec's seed.
pub fn inject(text: &str, spec: &NoiseSpec) -> Result<(String, NoiseReport)> {
    inject_indexed(text, spec, 0)
}

/// Noises sentence number `index` of a corpus. The random stream depends
/// only on `(spec.seed, index)`, so sentences can be processed in any order.
pub fn inject_indexed(text: &str, spec: &NoiseSpec, index: u64) -> Result<(String, NoiseReport)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, index);
    let mut out = String::with_capacity(text.len() + 8);
    let mut report = NoiseReport::default();
    for (is_space, run) in runs(text) {
        if is_space {
            out.push_str(run);
            continue;
        }
        report.tokens_total += 1;
        let selected = rng.random::<f64>() < spec.p;
        let eligible = spec.eligible(run);
        report.tokens_eligible += eligible as usize;
        if selected && eligible {
            report.tokens_noised += 1;
            out.push_str(&spec.transform(run, &mut rng));
        } else {
            out.push_str(run);
        }
    }
    Ok((out, report.finish()))
}

/// Noises every line of a corpus with per-line streams.
pub fn inject_corpus<S: AsRef<str>>(lines: &[S], spec: &NoiseSpec) -> Result<(Vec<String>, NoiseReport)> {
    let mut report = NoiseReport::default().finish();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let (noised, r) = inject_indexed(line.as_ref(), spec, i as u64)?;
        report = report.merge(r);
        out.push(noised);
    }
    Ok((out, report))
}

/// Splits text into alternating whitespace / non-whitespace runs.
fn runs(text: &str) -> impl Iterator<Item = (bool, &str)> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let first = rest.chars().next()?;
        let space = first.is_whitespace();
        let end = rest
            .char_indices()
            .find(|&(_, c)| c.is_whitespace() != space)
            .map_or(rest.len(), |(i, _)| i);
        let (run, tail) = rest.split_at(end);
        rest = tail;
        Some((space, run))
    })
}

/// Exchanges one uniformly chosen adjacent codepoint pair.
pub fn swap_word(word: &str, rng: &mut Rng) -> String {
    let n = word.chars().count();
    if n < 2 {
        return word.to_string();
    }
    swap_at(word, rng.random_range(0..n - 1))
}

/// Exchanges codepoints `i` and `i + 1`.
pub fn swap_at(word: &str, i: usize) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    chars.swap(i, i + 1);
    chars.into_iter().collect()
}

/// Shuffles the interior codepoints, keeping the first and last in place.
/// The result differs from the input whenever some rearrangement can.
pub fn cambridge_word(word: &str, rng: &mut Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    if n < 4 {
        return word.to_string();
    }
    let interior = &chars[1..n - 1];
    if interior.iter().all(|&c| c == interior[0]) {
        return word.to_string();
    }
    let mut shuffled = interior.to_vec();
    loop {
        shuffled.shuffle(rng);
        if shuffled != interior {
            break;
        }
    }
    let mut out = String::with_capacity(word.len());
    out.push(chars[0]);
    out.extend(shuffled);
    out.push(chars[n - 1]);
    out
}

/// Replaces each codepoint that has a table entry with probability `char_p`.
pub fn map_chars(word: &str, table: &CharTable, rng: &mut Rng, char_p: f64) -> String {
    word.chars()
        .map(|c| match table.get(c) {
            Some(choices) if rng.random::<f64>() < char_p => {
                if choices.len() == 1 {
                    choices[0]
                } else {
                    choices[rng.random_range(0..choices.len())]
                }
            }
            _ => c,
        })
        .collect()
}

/// After each base codepoint, inserts one uniformly drawn mark with
/// probability `char_p`.
pub fn insert_marks(word: &str, marks: &[char], rng: &mut Rng, char_p: f64) -> String {
    let mut out = String::with_capacity(word.len() * 2);
    for c in word.chars() {
        out.push(c);
        if !marks.is_empty() && rng.random::<f64>() < char_p {
            out.push(marks[rng.random_range(0..marks.len())]);
        }
    }
    out
}
