//! Word- and sentence-level padding layouts.
//!
//! A word is brought to exactly `m` columns either by centering it between
//! empty columns ([`pad_zero`]) or by repeating it ([`pad_cyclic`]). The
//! serpentine layout additionally rewrites the word sequence so that
//! consecutive slices read as one folded character stream: every interior
//! word appears twice, reversed then in order, and the last word appears
//! reversed only.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sentence encoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PaddingStrategy {
    Zero,
    Cyclic,
    #[default]
    Serpentine,
}

impl PaddingStrategy {
    pub const ALL: [PaddingStrategy; 3] = [Self::Zero, Self::Cyclic, Self::Serpentine];

    /// Layout used inside each word slice. Serpentine slices are always
    /// cyclically filled.
    pub fn word_padding(self) -> WordPadding {
        match self {
            Self::Zero => WordPadding::Zero,
            Self::Cyclic | Self::Serpentine => WordPadding::Cyclic,
        }
    }

    /// Number of word slices in an encoded sentence with word capacity `n`.
    pub fn slice_capacity(self, n: usize) -> usize {
        match self {
            Self::Zero | Self::Cyclic => n,
            Self::Serpentine => serpentine_len(n),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Cyclic => "cyclic",
            Self::Serpentine => "serpentine",
        }
    }
}

impl fmt::Display for PaddingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaddingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "cyclic" => Ok(Self::Cyclic),
            "serpentine" => Ok(Self::Serpentine),
            other => Err(Error::invalid(format!(
                "unknown padding strategy `{other}` (expected zero, cyclic or serpentine)"
            ))),
        }
    }
}

/// Layout of characters inside a single word slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordPadding {
    Zero,
    Cyclic,
}

/// Slice count of the serpentine sequence for an `n`-word sentence. A single
/// word still occupies one slice.
pub fn serpentine_len(n: usize) -> usize {
    if n >= 2 {
        2 * (n - 1)
    } else {
        n
    }
}

/// First `m` characters of `word`.
pub fn trim_word(word: &str, m: usize) -> &str {
    match word.char_indices().nth(m) {
        Some((end, _)) => &word[..end],
        None => word,
    }
}

/// `m` columns, each either a character or padding (`None`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedWordLayout {
    pub columns: Vec<Option<char>>,
    pub strategy: WordPadding,
}

impl PaddedWordLayout {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn pad_count(&self) -> usize {
        self.columns.iter().filter(|c| c.is_none()).count()
    }
}

fn check_word(word: &str, m: usize) -> Result<usize> {
    let len = word.chars().count();
    if len == 0 {
        return Err(Error::invalid("cannot pad an empty word"));
    }
    if len > m {
        return Err(Error::invalid(format!(
            "word `{word}` has {len} characters, more than the width {m}"
        )));
    }
    Ok(len)
}

/// Center the word; the odd leftover column goes to the right.
pub fn pad_zero(word: &str, m: usize) -> Result<PaddedWordLayout> {
    let len = check_word(word, m)?;
    let left = (m - len) / 2;
    let mut columns = vec![None; m];
    for (slot, c) in columns[left..left + len].iter_mut().zip(word.chars()) {
        *slot = Some(c);
    }
    Ok(PaddedWordLayout {
        columns,
        strategy: WordPadding::Zero,
    })
}

/// Column `j` holds `word[j mod len]`.
pub fn pad_cyclic(word: &str, m: usize) -> Result<PaddedWordLayout> {
    check_word(word, m)?;
    let columns = word.chars().cycle().take(m).map(Some).collect();
    Ok(PaddedWordLayout {
        columns,
        strategy: WordPadding::Cyclic,
    })
}

pub fn pad_word(word: &str, m: usize, padding: WordPadding) -> Result<PaddedWordLayout> {
    match padding {
        WordPadding::Zero => pad_zero(word, m),
        WordPadding::Cyclic => pad_cyclic(word, m),
    }
}

/// One slice of a serpentine sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerpentineSlice {
    pub word: String,
    pub reversed: bool,
}

impl SerpentineSlice {
    /// Characters in the order they are laid into the slice.
    pub fn text(&self) -> String {
        if self.reversed {
            self.word.chars().rev().collect()
        } else {
            self.word.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerpentineSequence {
    pub slices: Vec<SerpentineSlice>,
}

impl SerpentineSequence {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.slices.iter().map(SerpentineSlice::text).collect()
    }
}

/// `x1, rev(x2), x2, rev(x3), x3, ..., rev(x_n)`. A one-word sentence yields
/// that word in normal order.
pub fn serpentine_sequence<S: AsRef<str>>(words: &[S]) -> Result<SerpentineSequence> {
    let Some(first) = words.first() else {
        return Err(Error::invalid("serpentine sequence of an empty sentence"));
    };
    let mut slices = Vec::with_capacity(serpentine_len(words.len()));
    slices.push(SerpentineSlice {
        word: first.as_ref().to_owned(),
        reversed: false,
    });
    let last = words.len() - 1;
    for (i, w) in words.iter().enumerate().skip(1) {
        slices.push(SerpentineSlice {
            word: w.as_ref().to_owned(),
            reversed: true,
        });
        if i < last {
            slices.push(SerpentineSlice {
                word: w.as_ref().to_owned(),
                reversed: false,
            });
        }
    }
    Ok(SerpentineSequence { slices })
}

/// Left/right counts of empty slices that bring `len` slices up to `target`.
///
/// Zero and cyclic center the sentence (left = floor). Serpentine rounds the
/// left count down to an even number so normal-order words keep even indices.
pub fn sentence_pad_counts(
    len: usize,
    target: usize,
    strategy: PaddingStrategy,
) -> Result<(usize, usize)> {
    if len > target {
        return Err(Error::invalid(format!(
            "{len} slices do not fit in a capacity of {target}"
        )));
    }
    let total = target - len;
    let mut left = total / 2;
    if strategy == PaddingStrategy::Serpentine {
        left -= left % 2;
    }
    Ok((left, total - left))
}

/// Surround `slices` with `None` entries per [`sentence_pad_counts`].
pub fn pad_sentence_slices<T>(
    slices: Vec<T>,
    target: usize,
    strategy: PaddingStrategy,
) -> Result<Vec<Option<T>>> {
    let (left, right) = sentence_pad_counts(slices.len(), target, strategy)?;
    let mut out = Vec::with_capacity(target);
    out.extend(std::iter::repeat_with(|| None).take(left));
    out.extend(slices.into_iter().map(Some));
    out.extend(std::iter::repeat_with(|| None).take(right));
    Ok(out)
}

/// Text picture of the serpentine fold, one row per slice.
///
/// Rows show the slice columns left to right, so reversed slices read right to
/// left continue the stream of the row above. Cells filled by cyclic repetition
/// are printed in upper case so the original characters stand out.
pub fn fold_render<S: AsRef<str>>(words: &[S], m: usize) -> String {
    if words.is_empty() || m == 0 {
        return String::new();
    }
    let trimmed: Vec<&str> = words.iter().map(|w| trim_word(w.as_ref(), m)).collect();
    let seq = serpentine_sequence(&trimmed).expect("non-empty");
    seq.slices
        .iter()
        .map(|s| render_cyclic_row(&s.text(), m))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_cyclic_row(text: &str, m: usize) -> String {
    let len = text.chars().count();
    text.chars()
        .cycle()
        .take(m)
        .enumerate()
        .map(|(j, c)| if j < len { c } else { c.to_ascii_uppercase() })
        .collect()
}

/// One row per word under plain zero or cyclic padding; empty cells are `.`
/// and cyclic repeats upper case.
pub fn layout_render<S: AsRef<str>>(words: &[S], m: usize, padding: WordPadding) -> String {
    if m == 0 {
        return String::new();
    }
    words
        .iter()
        .map(|w| {
            let w = trim_word(w.as_ref(), m);
            match padding {
                WordPadding::Cyclic => render_cyclic_row(w, m),
                WordPadding::Zero => pad_zero(w, m)
                    .map(|l| l.columns.iter().map(|c| c.unwrap_or('.')).collect())
                    .unwrap_or_default(),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}
