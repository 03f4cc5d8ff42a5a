//! Text normalization, tokenization and vocabularies.
//!
//! Every model in the crate sees text through [`normalize`]: ASCII letters are
//! lower-cased, every other symbol becomes a word break. The result is a stream
//! of words over the 26-letter alphabet held by [`CharVocab`].

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Number of symbols in the Sent2Matrix character alphabet.
pub const ALPHABET_SIZE: usize = 26;

/// Reserved entry used by [`WordVocab`] for out-of-vocabulary words. It can
/// never collide with a normalized word.
pub const UNK_TOKEN: &str = "<unk>";

/// The fixed lower-case alphabet `a..z`. The word separator is not a member.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CharVocab;

impl CharVocab {
    pub const fn len(&self) -> usize {
        ALPHABET_SIZE
    }

    pub const fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        c.is_ascii_lowercase().then(|| (c as u8 - b'a') as usize)
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        (index < ALPHABET_SIZE).then(|| (b'a' + index as u8) as char)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> {
        'a'..='z'
    }
}

/// Lower-case ASCII letters, everything else folded into single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_ascii_alphabetic() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c.to_ascii_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// A sentence as an ordered list of non-empty lower-case words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedSentence {
    pub words: Vec<String>,
    pub source_id: Option<String>,
}

impl TokenizedSentence {
    pub fn new(words: Vec<String>) -> Self {
        Self {
            words,
            source_id: None,
        }
    }

    /// Normalize then tokenize raw text.
    pub fn from_raw(text: &str) -> Self {
        tokenize(&normalize(text))
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = Some(source_id.into());
        self
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Split normalized text on spaces. Empty runs are skipped so the result never
/// contains an empty word.
pub fn tokenize(normalized: &str) -> TokenizedSentence {
    TokenizedSentence::new(
        normalized
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

/// Frequency-ranked word inventory with a trailing `<unk>` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    size_cap: usize,
}

impl WordVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn size_cap(&self) -> usize {
        self.size_cap
    }

    pub fn unk_index(&self) -> usize {
        self.words.len() - 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, index: usize) -> Option<u64> {
        self.counts.get(index).copied()
    }

    /// Index of `word`, or `None` when it is out of vocabulary.
    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of `word`, falling back to the unk entry.
    pub fn index_of(&self, word: &str) -> usize {
        self.get(word).unwrap_or_else(|| self.unk_index())
    }

    /// `index<TAB>word<TAB>count`, one entry per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, (w, c)) in self.words.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{i}\t{w}\t{c}");
        }
        out
    }

    /// Inverse of [`WordVocab::dump`].
    pub fn parse_dump(text: &str, size_cap: usize) -> Result<Self> {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let mut fields = line.split('\t');
            let (Some(idx), Some(word), Some(count), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::data(format!(
                    "vocab line {}: expected 3 fields",
                    lineno + 1
                )));
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::data(format!("vocab line {}: bad index", lineno + 1)))?;
            if idx != words.len() {
                return Err(Error::data(format!(
                    "vocab line {}: index out of order",
                    lineno + 1
                )));
            }
            let count = count
                .parse()
                .map_err(|_| Error::data(format!("vocab line {}: bad count", lineno + 1)))?;
            words.push(word.to_owned());
            counts.push(count);
        }
        if words.last().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::data("vocab dump must end with the unk entry"));
        }
        if words.len() > size_cap {
            return Err(Error::data("vocab dump larger than its size cap"));
        }
        Ok(Self::from_parts(words, counts, size_cap))
    }

    fn from_parts(words: Vec<String>, counts: Vec<u64>, size_cap: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            words,
            counts,
            index,
            size_cap,
        }
    }
}

/// Keep the `size_cap - 1` most frequent words (ties broken lexicographically)
/// and append `<unk>`, whose count is the number of dropped occurrences.
pub fn build_word_vocab<'a, I>(corpus: I, size_cap: usize) -> Result<WordVocab>
where
    I: IntoIterator<Item = &'a TokenizedSentence>,
{
    if size_cap < 2 {
        return Err(Error::invalid("word vocabulary cap must be at least 2"));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for sentence in corpus {
        for w in &sentence.words {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::data(
            "cannot build a word vocabulary from an empty corpus",
        ));
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep = ranked.len().min(size_cap - 1);
    let dropped: u64 = ranked[keep..].iter().map(|(_, c)| c).sum();

    let mut words: Vec<String> = ranked[..keep]
        .iter()
        .map(|(w, _)| (*w).to_owned())
        .collect();
    let mut counts: Vec<u64> = ranked[..keep].iter().map(|(_, c)| *c).collect();
    words.push(UNK_TOKEN.to_owned());
    counts.push(dropped);
    Ok(WordVocab::from_parts(words, counts, size_cap))
}
