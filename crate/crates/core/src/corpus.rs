//! Parallel corpora and the synthetic translation tasks used for
//! desk-scale experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Two aligned line lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl ParallelCorpus {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::invalid(format!(
                "source has {} lines, target has {}",
                source.len(),
                target.len()
            )));
        }
        Ok(Self { source, target })
    }

    pub fn load(source: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_lines(source.as_ref())?, read_lines(target.as_ref())?)
    }

    pub fn save(&self, source: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<()> {
        write_lines(source.as_ref(), &self.source)?;
        write_lines(target.as_ref(), &self.target)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// First `n` pairs, or all of them.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            source: self.source[..n].to_vec(),
            target: self.target[..n].to_vec(),
        }
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.len().saturating_sub(n);
        let tail = Self {
            source: self.source.split_off(at),
            target: self.target.split_off(at),
        };
        (self, tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    MappedLexicon,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped-lexicon" | "lexicon" => Ok(TaskKind::MappedLexicon),
            _ => Err(Error::invalid(format!("unknown task {s:?}"))),
        }
    }
}

/// Generator settings. Copy and reverse sentences are space-separated
/// single symbols from `alphabet`; mapped-lexicon sentences are words from a
/// lexicon spelled over `alphabet`, each mapped to a distinct target word
/// spelled over `target_alphabet`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub task: TaskKind,
    pub size: usize,
    pub seed: u64,
    pub alphabet: String,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub lexicon_size: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub target_alphabet: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Copy,
            size: 2000,
            seed: 1,
            alphabet: "abcdefghijklmnopqrst".into(),
            min_tokens: 3,
            max_tokens: 8,
            lexicon_size: 100,
            min_word_len: 3,
            max_word_len: 6,
            target_alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
        }
    }
}

fn distinct_chars(s: &str, what: &str) -> Result<Vec<char>> {
    let chars: Vec<char> = s.chars().collect();
    let set: BTreeSet<char> = chars.iter().copied().collect();
    if chars.is_empty() || set.len() != chars.len() || chars.iter().any(|c| c.is_whitespace()) {
        return Err(Error::invalid(format!(
            "{what} must be non-empty, without repeats or whitespace"
        )));
    }
    Ok(chars)
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("corpus size must be >= 1"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::invalid("need 1 <= min_tokens <= max_tokens"));
        }
        distinct_chars(&self.alphabet, "alphabet")?;
        if self.task == TaskKind::MappedLexicon {
            distinct_chars(&self.target_alphabet, "target alphabet")?;
            if self.lexicon_size == 0 || self.min_word_len == 0 || self.min_word_len > self.max_word_len {
                return Err(Error::invalid(
                    "need lexicon_size >= 1 and 1 <= min_word_len <= max_word_len",
                ));
            }
            let room = |n: usize| -> f64 {
                (self.min_word_len..=self.max_word_len)
                    .map(|l| (n as f64).powi(l as i32))
                    .sum()
            };
            let need = self.lexicon_size as f64;
            if room(self.alphabet.chars().count()) < 2.0 * need
                || room(self.target_alphabet.chars().count()) < 2.0 * need
            {
                return Err(Error::invalid("alphabets too small for the requested lexicon"));
            }
        }
        Ok(())
    }
}

fn random_word(alphabet: &[char], min: usize, max: usize, rng: &mut Rng) -> String {
    let len = rng.random_range(min..=max);
    (0..len)
        .map(|_| *alphabet.choose(rng).expect("alphabet non-empty"))
        .collect()
}

fn distinct_words(n: usize, alphabet: &[char], min: usize, max: usize, rng: &mut Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = random_word(alphabet, min, max, rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A generated corpus plus, for mapped-lexicon, the source→target lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: ParallelCorpus,
    pub lexicon: Vec<(String, String)>,
}

pub fn gen_synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let alphabet = distinct_chars(&spec.alphabet, "alphabet")?;
    let mut lex_rng = rng::stream(spec.seed, 0);
    let mut rng = rng::stream(spec.seed, 1);
    let lexicon: Vec<(String, String)> = match spec.task {
        TaskKind::MappedLexicon => {
            let target_alphabet = distinct_chars(&spec.target_alphabet, "target alphabet")?;
            let src = distinct_words(
                spec.lexicon_size,
                &alphabet,
                spec.min_word_len,
                spec.max_word_len,
                &mut lex_rng,
            );
            let tgt = distinct_words(
                spec.lexicon_size,
                &target_alphabet,
                spec.min_word_len,
                spec.max_word_len,
                &mut lex_rng,
            );
            src.into_iter().zip(tgt).collect()
        }
        _ => Vec::new(),
    };
    let mut source = Vec::with_capacity(spec.size);
    let mut target = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
        match spec.task {
            TaskKind::Copy | TaskKind::Reverse => {
                let toks: Vec<String> = (0..n)
                    .map(|_| alphabet.choose(&mut rng).expect("alphabet non-empty").to_string())
                    .collect();
                let mut out = toks.clone();
                if spec.task == TaskKind::Reverse {
                    out.reverse();
                }
                source.push(toks.join(" "));
                target.push(out.join(" "));
            }
            TaskKind::MappedLexicon => {
                let picks: Vec<&(String, String)> = (0..n)
                    .map(|_| lexicon.choose(&mut rng).expect("lexicon non-empty"))
                    .collect();
                source.push(picks.iter().map(|p| p.0.as_str()).collect::<Vec<_>>().join(" "));
                target.push(picks.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join(" "));
            }
        }
    }
    Ok(SyntheticCorpus {
        corpus: ParallelCorpus { source, target },
        lexicon,
    })
}

pub fn reverse_tokens(line: &str) -> String {
    let mut toks: Vec<&str> = line.split_whitespace().collect();
    toks.reverse();
    toks.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn copy_single_line() {
        let spec = CorpusSpec {
            size: 1,
            ..Default::default()
        };
        let c = gen_synthetic_corpus(&spec).unwrap().corpus;
        assert_eq!(c.source, c.target);
        assert_eq!(c.len(), 1);
        let symbols: BTreeSet<&str> = c.source[0].split(' ').collect();
        assert!(symbols.iter().all(|s| s.chars().count() == 1));
    }

    #[test]
    fn reverse_task() {
        assert_eq!(reverse_tokens("a b c"), "c b a");
        let spec = CorpusSpec {
            task: TaskKind::Reverse,
            size: 50,
            ..Default::default()
        };
        let c = gen_synthetic_corpus(&spec).unwrap().corpus;
        for (s, t) in c.source.iter().zip(&c.target) {
            assert_eq!(&reverse_tokens(s), t);
        }
    }

    #[test]
    fn lexicon_is_bijective() {
        let spec = CorpusSpec {
            task: TaskKind::MappedLexicon,
            size: 300,
            seed: 9,
            ..Default::default()
        };
        let g = gen_synthetic_corpus(&spec).unwrap();
        let inverse: HashMap<&str, &str> = g.lexicon.iter().map(|(s, t)| (t.as_str(), s.as_str())).collect();
        assert_eq!(inverse.len(), spec.lexicon_size);
        for (s, t) in g.corpus.source.iter().zip(&g.corpus.target) {
            let back: Vec<&str> = t.split(' ').map(|w| inverse[w]).collect();
            assert_eq!(&back.join(" "), s);
        }
    }

    #[test]
    fn seeded_and_validated() {
        let spec = CorpusSpec::default();
        assert_eq!(
            gen_synthetic_corpus(&spec).unwrap(),
            gen_synthetic_corpus(&spec).unwrap()
        );
        let other = CorpusSpec {
            seed: 2,
            ..spec.clone()
        };
        assert_ne!(
            gen_synthetic_corpus(&spec).unwrap(),
            gen_synthetic_corpus(&other).unwrap()
        );
        assert!(CorpusSpec {
            size: 0,
            ..spec.clone()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            alphabet: "aa".into(),
            ..spec.clone()
        }
        .validate()
        .is_err());
        let tiny = CorpusSpec {
            task: TaskKind::MappedLexicon,
            alphabet: "ab".into(),
            min_word_len: 1,
            max_word_len: 1,
            ..spec
        };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_synthetic_corpus(&CorpusSpec {
            size: 5,
            ..Default::default()
        })
        .unwrap()
        .corpus;
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        c.save(&s, &t).unwrap();
        assert_eq!(ParallelCorpus::load(&s, &t).unwrap(), c);
        let (train, dev) = c.split_tail(2);
        assert_eq!((train.len(), dev.len()), (3, 2));
    }
}
