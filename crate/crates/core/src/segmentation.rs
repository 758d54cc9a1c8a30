//! Text-side segmentation: greedy byte-pair encoding (with BPE-dropout),
//! character, word and overlapping character n-gram tokenizers.
//!
//! Tokens carry a `word_final` flag instead of an in-band boundary marker.
//! Inside the BPE model the flag is spelled as a `</w>` suffix on the last
//! symbol of a word, so `b` and `b</w>` are different vocabulary entries.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const END_OF_WORD: &str = "</w>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
/// Filler codepoint for the final, short n-gram window of a word.
pub const NGRAM_PAD: char = '\u{2423}';

fn key(surface: &str, word_final: bool) -> String {
    if word_final {
        format!("{surface}{END_OF_WORD}")
    } else {
        surface.to_string()
    }
}

fn split_key(symbol: &str) -> (&str, bool) {
    match symbol.strip_suffix(END_OF_WORD) {
        Some(s) => (s, true),
        None => (symbol, false),
    }
}

/// Symbol table with the four specials at fixed ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Vocab {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for s in [PAD, UNK, BOS, EOS] {
            v.add(s);
        }
        v
    }
}

impl Vocab {
    pub fn add(&mut self, symbol: &str) -> usize {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        let id = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), id);
        id
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map_or(UNK, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn is_special(id: usize) -> bool {
        id <= EOS_ID
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub surface: Vec<String>,
    /// True for the last token of each whitespace-delimited word.
    pub word_final: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: usize, surface: &str, word_final: bool) {
        self.ids.push(id);
        self.surface.push(surface.to_string());
        self.word_final.push(word_final);
    }

    /// Wraps the sequence in BOS ... EOS.
    pub fn with_specials(mut self) -> Self {
        self.ids.insert(0, BOS_ID);
        self.surface.insert(0, BOS.to_string());
        self.word_final.insert(0, false);
        self.push(EOS_ID, EOS, false);
        self
    }

    /// Number of tokens excluding BOS/EOS/PAD.
    pub fn content_len(&self) -> usize {
        self.ids
            .iter()
            .filter(|&&id| id != BOS_ID && id != EOS_ID && id != PAD_ID)
            .count()
    }

    /// Joins surfaces, separating words with a single space. Specials are
    /// dropped.
    pub fn detokenize(&self) -> String {
        let mut out = String::new();
        for ((&id, s), &fin) in self.ids.iter().zip(&self.surface).zip(&self.word_final) {
            if matches!(id, BOS_ID | EOS_ID | PAD_ID) {
                continue;
            }
            out.push_str(s);
            if fin {
                out.push(' ');
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        out
    }

    /// Debug rendering with `·` between tokens, e.g. `la·ng·au·ge`.
    pub fn display(&self) -> String {
        let mut out = String::new();
        for (i, (s, &fin)) in self.surface.iter().zip(&self.word_final).enumerate() {
            out.push_str(s);
            if i + 1 < self.surface.len() {
                out.push_str(if fin { " " } else { "·" });
            }
        }
        out
    }
}

/// Ordered merge list learned by greedy pair merging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    alphabet: BTreeSet<char>,
    vocab: Vocab,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_parts(merges: Vec<(String, String)>, alphabet: BTreeSet<char>) -> Result<Self> {
        let mut vocab = Vocab::default();
        for &c in &alphabet {
            let s = c.to_string();
            vocab.add(&s);
            vocab.add(&key(&s, true));
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            if l.is_empty() || r.is_empty() || split_key(l).1 {
                return Err(Error::invalid(format!("malformed merge `{l}` `{r}`")));
            }
            for part in [l, r] {
                if !vocab.index.contains_key(part.as_str()) {
                    return Err(Error::invalid(format!(
                        "merge {rank} uses `{part}` before it is derivable"
                    )));
                }
            }
            vocab.add(&format!("{l}{r}"));
            ranks.entry((l.clone(), r.clone())).or_insert(rank);
        }
        Ok(Self {
            merges,
            alphabet,
            vocab,
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Model restricted to its first `k` merges.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.merges.len());
        Self::from_parts(self.merges[..k].to_vec(), self.alphabet.clone())
            .expect("prefix of a valid merge list is valid")
    }

    /// Serializes as `bpe-v1 <merge_count>` followed by one `LEFT<TAB>RIGHT`
    /// line per merge. The base alphabet follows in an `alphabet <n>`
    /// section so characters that never merged stay in the vocabulary.
    pub fn to_text(&self) -> String {
        let mut out = format!("bpe-v1 {}\n", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l}\t{r}");
        }
        let _ = writeln!(out, "alphabet {}", self.alphabet.len());
        for c in &self.alphabet {
            let _ = writeln!(out, "{c}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("empty BPE model"))?;
        let count: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::parse(format!("bad BPE header `{header}`")))?;
        let mut merges = Vec::with_capacity(count);
        for i in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(format!("expected {count} merges, found {i}")))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(format!("bad merge line `{line}`")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut alphabet = BTreeSet::new();
        if let Some(line) = lines.next() {
            let n: usize = line
                .strip_prefix("alphabet ")
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| Error::parse(format!("bad alphabet header `{line}`")))?;
            for _ in 0..n {
                let line = lines.next().ok_or_else(|| Error::parse("truncated alphabet"))?;
                let mut cs = line.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => {
                        alphabet.insert(c);
                    }
                    _ => return Err(Error::parse(format!("bad alphabet entry `{line}`"))),
                }
            }
        } else {
            // plain merge list: every character named by a merge is an axiom
            for (l, r) in &merges {
                for part in [l, r] {
                    alphabet.extend(split_key(part).0.chars());
                }
            }
        }
        Self::from_parts(merges, alphabet)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn word_symbols(word: &str) -> Vec<String> {
        let n = word.chars().count();
        word.chars()
            .enumerate()
            .map(|(i, c)| key(&c.to_string(), i + 1 == n))
            .collect()
    }

    /// Greedy merging of one word. Each step merges the leftmost adjacent
    /// pair of lowest rank; with dropout every candidate is first discarded
    /// with probability `drop_p`, and merging stops when none survive.
    fn merge_word(&self, word: &str, dropout: Option<(f64, &mut Rng)>) -> Vec<String> {
        let mut symbols = Self::word_symbols(word);
        let mut dropout = dropout.filter(|(p, _)| *p > 0.0);
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                let Some(&rank) = self.ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) else {
                    continue;
                };
                if let Some((p, rng)) = dropout.as_mut() {
                    if rng.random::<f64>() < *p {
                        continue;
                    }
                }
                if best.is_none_or(|(r, _)| rank < r) {
                    best = Some((rank, i));
                }
            }
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        symbols
    }

    fn encode(&self, text: &str, mut dropout: Option<(f64, &mut Rng)>) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for word in text.split_whitespace() {
            let symbols = match dropout.as_mut() {
                Some((p, rng)) => self.merge_word(word, Some((*p, &mut **rng))),
                None => self.merge_word(word, None),
            };
            for sym in symbols {
                let (surface, fin) = split_key(&sym);
                seq.push(self.vocab.id(&sym), surface, fin);
            }
        }
        seq
    }
}

/// Learns `merge_count` merges from whitespace-split word frequencies.
/// Ties on frequency go to the lexicographically smallest (left, right).
/// Stops early if no adjacent pairs remain.
pub fn bpe_train<I, S>(corpus: I, merge_count: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freqs: HashMap<String, usize> = HashMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for w in line.as_ref().split_whitespace() {
            *freqs.entry(w.to_string()).or_default() += 1;
        }
    }
    if lines == 0 {
        return Err(Error::invalid("cannot train BPE on an empty corpus"));
    }
    let mut words: Vec<(Vec<String>, usize)> = freqs.iter().map(|(w, &f)| (BpeModel::word_symbols(w), f)).collect();
    words.sort();
    let alphabet: BTreeSet<char> = freqs.keys().flat_map(|w| w.chars()).collect();

    let mut merges = Vec::with_capacity(merge_count);
    for _ in 0..merge_count {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *pairs.entry((&pair[0], &pair[1])).or_default() += f;
            }
        }
        let Some((&(l, r), _)) = pairs
            .iter()
            .max_by(|(pa, fa), (pb, fb)| fa.cmp(fb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == l && syms[i + 1] == r {
                    let right = syms.remove(i + 1);
                    syms[i].push_str(&right);
                }
                i += 1;
            }
        }
        merges.push((l, r));
    }
    BpeModel::from_parts(merges, alphabet)
}

/// Deterministic BPE segmentation. Codepoints outside the model alphabet
/// become UNK ids but keep their surface.
pub fn bpe_apply(text: &str, model: &BpeModel) -> TokenSequence {
    model.encode(text, None)
}

/// BPE segmentation that skips each merge opportunity with probability
/// `drop_p`.
pub fn bpe_dropout_apply(text: &str, model: &BpeModel, drop_p: f64, rng: &mut Rng) -> TokenSequence {
    model.encode(text, Some((drop_p, rng)))
}

fn char_tokens(text: &str, vocab: Option<&Vocab>) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for word in text.split_whitespace() {
        let n = word.chars().count();
        for (i, c) in word.chars().enumerate() {
            let s = c.to_string();
            let fin = i + 1 == n;
            let id = vocab.map_or(UNK_ID, |v| v.id(&key(&s, fin)));
            seq.push(id, &s, fin);
        }
    }
    seq
}

fn word_tokens(text: &str, vocab: Option<&Vocab>) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for word in text.split_whitespace() {
        let id = vocab.map_or(UNK_ID, |v| v.id(&key(word, true)));
        seq.push(id, word, true);
    }
    seq
}

/// Windows of `n` codepoints every `stride` codepoints within each word;
/// the last window of a word is right-padded with [`NGRAM_PAD`].
pub fn char_ngrams(text: &str, n: usize, stride: usize) -> Result<TokenSequence> {
    ngram_tokens(text, n, stride, None)
}

fn ngram_tokens(text: &str, n: usize, stride: usize, vocab: Option<&Vocab>) -> Result<TokenSequence> {
    if n == 0 || stride == 0 || stride > n {
        return Err(Error::invalid(format!("n-gram order {n} / stride {stride} invalid")));
    }
    let mut seq = TokenSequence::default();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let count = crate::slicer::num_slices(chars.len(), crate::slicer::SliceConfig { window: n, stride });
        for i in 0..count {
            let start = i * stride;
            let gram: String = (start..start + n)
                .map(|j| chars.get(j).copied().unwrap_or(NGRAM_PAD))
                .collect();
            let fin = i + 1 == count;
            let id = vocab.map_or(UNK_ID, |v| v.id(&key(&gram, fin)));
            seq.push(id, &gram, fin);
        }
    }
    Ok(seq)
}

/// Segmentation scheme plus the vocabulary used to assign ids.
#[derive(Debug, Clone)]
pub enum Segmenter {
    Bpe(BpeModel),
    Char(Vocab),
    Word(Vocab),
    Ngram { n: usize, stride: usize, vocab: Vocab },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    Bpe { merges: usize },
    Char,
    Word,
    Ngram { n: usize, stride: usize },
}

impl std::str::FromStr for SegmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(SegmentMode::Char),
            "word" => Ok(SegmentMode::Word),
            "bpe" => Ok(SegmentMode::Bpe { merges: 500 }),
            "ngram" => Ok(SegmentMode::Ngram { n: 3, stride: 1 }),
            other => Err(Error::invalid(format!("unknown segmentation mode `{other}`"))),
        }
    }
}

impl Segmenter {
    /// Builds a segmenter (and its vocabulary) from a training corpus.
    pub fn fit<S: AsRef<str>>(mode: SegmentMode, corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot fit a segmenter on an empty corpus"));
        }
        let collect = |seqs: &mut dyn Iterator<Item = TokenSequence>| {
            let mut vocab = Vocab::default();
            for seq in seqs {
                for (s, &fin) in seq.surface.iter().zip(&seq.word_final) {
                    vocab.add(&key(s, fin));
                }
            }
            vocab
        };
        Ok(match mode {
            SegmentMode::Bpe { merges } => Segmenter::Bpe(bpe_train(corpus.iter().map(|s| s.as_ref()), merges)?),
            SegmentMode::Char => Segmenter::Char(collect(&mut corpus.iter().map(|s| char_tokens(s.as_ref(), None)))),
            SegmentMode::Word => Segmenter::Word(collect(&mut corpus.iter().map(|s| word_tokens(s.as_ref(), None)))),
            SegmentMode::Ngram { n, stride } => {
                let seqs = corpus
                    .iter()
                    .map(|s| ngram_tokens(s.as_ref(), n, stride, None))
                    .collect::<Result<Vec<_>>>()?;
                Segmenter::Ngram {
                    n,
                    stride,
                    vocab: collect(&mut seqs.into_iter()),
                }
            }
        })
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Segmenter::Bpe(m) => m.vocab(),
            Segmenter::Char(v) | Segmenter::Word(v) | Segmenter::Ngram { vocab: v, .. } => v,
        }
    }

    /// Segments without BOS/EOS.
    pub fn tokens(&self, text: &str) -> TokenSequence {
        match self {
            Segmenter::Bpe(m) => bpe_apply(text, m),
            Segmenter::Char(v) => char_tokens(text, Some(v)),
            Segmenter::Word(v) => word_tokens(text, Some(v)),
            Segmenter::Ngram { n, stride, vocab } => {
                ngram_tokens(text, *n, *stride, Some(vocab)).expect("validated at fit time")
            }
        }
    }

    /// Segments and wraps in BOS ... EOS for model consumption.
    pub fn segment(&self, text: &str) -> TokenSequence {
        self.tokens(text).with_specials()
    }

    /// Maps model output ids back to text. UNK ids surface as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let vocab = self.vocab();
        let mut seq = TokenSequence::default();
        for &id in ids {
            let (surface, fin) = if id == UNK_ID {
                (UNK, true)
            } else {
                split_key(vocab.symbol(id))
            };
            seq.push(id, surface, fin);
        }
        seq.detokenize()
    }
}

/// Mode-dispatching segmentation with BOS/EOS, matching [`Segmenter::segment`]
/// for a segmenter built without a vocabulary. BPE mode needs a model.
pub fn segment(text: &str, mode: SegmentMode, bpe: Option<&BpeModel>) -> Result<TokenSequence> {
    let seq = match mode {
        SegmentMode::Bpe { .. } => {
            let model = bpe.ok_or_else(|| Error::invalid("bpe mode requires a trained model"))?;
            bpe_apply(text, model)
        }
        SegmentMode::Char => char_tokens(text, None),
        SegmentMode::Word => word_tokens(text, None),
        SegmentMode::Ngram { n, stride } => ngram_tokens(text, n, stride, None)?,
    };
    Ok(seq.with_specials())
}
