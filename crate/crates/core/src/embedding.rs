//! The three text representations: word-level embedding sequences, baseline
//! character sequences, and Sent2Matrix sentence tensors.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::padding::{
    pad_sentence_slices, pad_word, serpentine_sequence, trim_word, PaddingStrategy,
};
use crate::text::{CharVocab, TokenizedSentence, WordVocab, ALPHABET_SIZE};

/// Baseline character vocabulary: the alphabet plus the word separator.
pub const BASELINE_CHAR_VOCAB_SIZE: usize = ALPHABET_SIZE + 1;
/// Index of the space separator in the baseline vocabulary.
pub const SEPARATOR_INDEX: usize = ALPHABET_SIZE;

/// One-hot vector of `word` over the word vocabulary (unk for unknown words).
pub fn word_one_hot(word: &str, vocab: &WordVocab) -> Vec<f64> {
    let mut u = vec![0.0; vocab.len()];
    u[vocab.index_of(word)] = 1.0;
    u
}

/// Learnable `d_w x |V^w|` projection of one-hot word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingMatrix {
    pub d_w: usize,
    pub vocab_size: usize,
    /// Row-major `d_w x vocab_size`.
    pub values: Vec<f64>,
}

impl WordEmbeddingMatrix {
    pub fn new(d_w: usize, vocab_size: usize, values: Vec<f64>) -> Result<Self> {
        if d_w == 0 || vocab_size == 0 {
            return Err(Error::invalid("embedding dimensions must be positive"));
        }
        if values.len() != d_w * vocab_size {
            return Err(Error::shape(format!(
                "embedding matrix needs {} values, got {}",
                d_w * vocab_size,
                values.len()
            )));
        }
        Ok(Self {
            d_w,
            vocab_size,
            values,
        })
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        (0..self.d_w)
            .map(|r| self.values[r * self.vocab_size + index])
            .collect()
    }
}

/// `M u`. A one-hot `u` selects a column; any other vector falls back to the
/// dense product.
pub fn word_embed(u: &[f64], matrix: &WordEmbeddingMatrix) -> Result<Vec<f64>> {
    if u.len() != matrix.vocab_size {
        return Err(Error::shape(format!(
            "one-hot of length {} against {} embedding columns",
            u.len(),
            matrix.vocab_size
        )));
    }
    let mut hot = u.iter().enumerate().filter(|(_, &x)| x != 0.0);
    if let (Some((i, &1.0)), None) = (hot.next(), hot.next()) {
        return Ok(matrix.column(i));
    }
    Ok((0..matrix.d_w)
        .map(|r| {
            let row = &matrix.values[r * matrix.vocab_size..(r + 1) * matrix.vocab_size];
            row.iter().zip(u).map(|(a, b)| a * b).sum()
        })
        .collect())
}

/// Embedded sentence, `d_w x n`, zero columns past the sentence end.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSeqMatrix {
    pub d_w: usize,
    pub n: usize,
    /// Row-major `d_w x n`.
    pub values: Vec<f64>,
}

impl WordSeqMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }
}

/// Vocabulary indices of the first `n` words, `None` past the sentence end.
pub fn word_indices(
    sentence: &TokenizedSentence,
    vocab: &WordVocab,
    n: usize,
) -> Vec<Option<usize>> {
    let mut idx: Vec<Option<usize>> = sentence
        .words
        .iter()
        .take(n)
        .map(|w| Some(vocab.index_of(w)))
        .collect();
    idx.resize(n, None);
    idx
}

pub fn sentence_word_matrix(
    sentence: &TokenizedSentence,
    vocab: &WordVocab,
    matrix: &WordEmbeddingMatrix,
    n: usize,
) -> Result<WordSeqMatrix> {
    if n == 0 {
        return Err(Error::invalid("sentence capacity must be at least 1"));
    }
    if vocab.len() != matrix.vocab_size {
        return Err(Error::shape(
            "vocabulary and embedding matrix disagree in size",
        ));
    }
    let mut values = vec![0.0; matrix.d_w * n];
    for (col, idx) in word_indices(sentence, vocab, n).into_iter().enumerate() {
        let Some(idx) = idx else { continue };
        let p = word_embed(&word_one_hot(&vocab.words()[idx], vocab), matrix)?;
        for (r, v) in p.into_iter().enumerate() {
            values[r * n + col] = v;
        }
    }
    Ok(WordSeqMatrix {
        d_w: matrix.d_w,
        n,
        values,
    })
}

pub fn char_one_hot(c: char, vocab: &CharVocab) -> Result<Vec<f64>> {
    let i = vocab
        .index_of(c)
        .ok_or_else(|| Error::invalid(format!("character {c:?} is not in the alphabet")))?;
    let mut v = vec![0.0; vocab.len()];
    v[i] = 1.0;
    Ok(v)
}

/// Index in the 27-symbol baseline vocabulary.
pub fn baseline_char_index(c: char) -> Option<usize> {
    match c {
        ' ' => Some(SEPARATOR_INDEX),
        _ => CharVocab.index_of(c),
    }
}

/// Baseline character sequence, `27 x m_s`, all-zero columns as padding.
#[derive(Debug, Clone, PartialEq)]
pub struct CharSeqMatrix {
    pub m_s: usize,
    /// Row-major `27 x m_s`.
    pub values: Vec<f64>,
}

impl CharSeqMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.m_s + col]
    }

    /// Symbol index hot in `col`, if any.
    pub fn hot(&self, col: usize) -> Option<usize> {
        (0..BASELINE_CHAR_VOCAB_SIZE).find(|&r| self.get(r, col) != 0.0)
    }
}

/// Words joined by single separators, one-hot per column, zero-padded or
/// trimmed to `m_s` columns.
pub fn sentence_char_matrix(sentence: &TokenizedSentence, m_s: usize) -> Result<CharSeqMatrix> {
    if m_s == 0 {
        return Err(Error::invalid("character capacity must be at least 1"));
    }
    let mut values = vec![0.0; BASELINE_CHAR_VOCAB_SIZE * m_s];
    let joined = sentence.words.join(" ");
    for (col, c) in joined.chars().take(m_s).enumerate() {
        let row = baseline_char_index(c)
            .ok_or_else(|| Error::invalid(format!("character {c:?} is not encodable")))?;
        values[row * m_s + col] = 1.0;
    }
    Ok(CharSeqMatrix { m_s, values })
}

/// One padded word: `26 x m`, one-hot characters along the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WordMatrix {
    pub m: usize,
    /// Row-major `26 x m`.
    pub values: Vec<f64>,
}

impl WordMatrix {
    pub fn get(&self, channel: usize, col: usize) -> f64 {
        self.values[channel * self.m + col]
    }

    /// Argmax per column, `None` for empty columns.
    pub fn decode(&self) -> Vec<Option<char>> {
        (0..self.m)
            .map(|j| {
                (0..ALPHABET_SIZE)
                    .find(|&c| self.get(c, j) != 0.0)
                    .and_then(|c| CharVocab.symbol(c))
            })
            .collect()
    }
}

/// Encode one word, trimmed to its first `m` characters, with the in-word
/// layout of `strategy`.
pub fn word_matrix(word: &str, m: usize, strategy: PaddingStrategy) -> Result<WordMatrix> {
    if m == 0 {
        return Err(Error::invalid("word width must be at least 1"));
    }
    let layout = pad_word(trim_word(word, m), m, strategy.word_padding())?;
    let mut values = vec![0.0; ALPHABET_SIZE * m];
    for (j, c) in layout.columns.iter().enumerate() {
        if let Some(c) = c {
            let k = CharVocab
                .index_of(*c)
                .ok_or_else(|| Error::invalid(format!("character {c:?} is not in the alphabet")))?;
            values[k * m + j] = 1.0;
        }
    }
    Ok(WordMatrix { m, values })
}

/// Stacked word matrices: `slices x m x channels`, channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct SentTensor {
    pub slices: usize,
    pub m: usize,
    pub channels: usize,
    pub strategy: PaddingStrategy,
    pub use_position: bool,
    pub data: Vec<f64>,
}

impl SentTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.slices, self.m, self.channels)
    }

    pub fn index(&self, slice: usize, col: usize, channel: usize) -> usize {
        (slice * self.m + col) * self.channels + channel
    }

    pub fn get(&self, slice: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(slice, col, channel)]
    }

    /// The channel fiber at `(slice, col)`.
    pub fn fiber(&self, slice: usize, col: usize) -> &[f64] {
        let start = self.index(slice, col, 0);
        &self.data[start..start + self.channels]
    }

    pub fn is_zero_slice(&self, slice: usize) -> bool {
        let start = slice * self.m * self.channels;
        self.data[start..start + self.m * self.channels]
            .iter()
            .all(|&v| v == 0.0)
    }

    /// Character at each column of a slice, `None` for empty columns.
    pub fn decode_slice(&self, slice: usize) -> Vec<Option<char>> {
        (0..self.m)
            .map(|j| {
                self.fiber(slice, j)[..ALPHABET_SIZE]
                    .iter()
                    .position(|&v| v != 0.0)
                    .and_then(|c| CharVocab.symbol(c))
            })
            .collect()
    }

    /// Channel-first copy, `channels x m x slices`: the network's input layout
    /// with the character axis as height and the word axis as width.
    pub fn to_channels_first(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        self.write_channels_first(&mut out);
        out
    }

    pub fn write_channels_first(&self, out: &mut [f64]) {
        let (n, m, c) = self.shape();
        for s in 0..n {
            for j in 0..m {
                let fiber = self.fiber(s, j);
                for (k, &v) in fiber.iter().enumerate().take(c) {
                    out[(k * m + j) * n + s] = v;
                }
            }
        }
    }
}

/// Slice texts of a sentence before encoding: `None` for empty slices.
///
/// Sentences are cut to their first `n` words and words to their first `m`
/// characters before any layout is applied.
pub fn sentence_slices(
    sentence: &TokenizedSentence,
    n: usize,
    m: usize,
    strategy: PaddingStrategy,
) -> Result<Vec<Option<String>>> {
    if n == 0 || m == 0 {
        return Err(Error::invalid(
            "sentence capacity and word width must be at least 1",
        ));
    }
    let words: Vec<&str> = sentence
        .words
        .iter()
        .take(n)
        .map(|w| trim_word(w, m))
        .collect();
    let target = strategy.slice_capacity(n);
    let texts = match strategy {
        PaddingStrategy::Serpentine if !words.is_empty() => serpentine_sequence(&words)?.texts(),
        _ => words.iter().map(|w| (*w).to_owned()).collect(),
    };
    pad_sentence_slices(texts, target, strategy)
}

/// Encode a sentence as a Sent2Matrix tensor.
pub fn sentence_tensor(
    sentence: &TokenizedSentence,
    n: usize,
    m: usize,
    strategy: PaddingStrategy,
    use_position: bool,
) -> Result<SentTensor> {
    let slices = sentence_slices(sentence, n, m, strategy)?;
    let count = slices.len();
    let mut data = vec![0.0; count * m * ALPHABET_SIZE];
    for (s, text) in slices.iter().enumerate() {
        let Some(text) = text else { continue };
        let wm = word_matrix(text, m, strategy)?;
        for j in 0..m {
            for c in 0..ALPHABET_SIZE {
                data[(s * m + j) * ALPHABET_SIZE + c] = wm.get(c, j);
            }
        }
    }
    let plain = SentTensor {
        slices: count,
        m,
        channels: ALPHABET_SIZE,
        strategy,
        use_position: false,
        data,
    };
    if use_position {
        position_channels(&plain)
    } else {
        Ok(plain)
    }
}

/// Append `m` one-hot column-position channels to every non-empty cell.
pub fn position_channels(tensor: &SentTensor) -> Result<SentTensor> {
    if tensor.channels != ALPHABET_SIZE || tensor.use_position {
        return Err(Error::shape(format!(
            "position channels need a plain {ALPHABET_SIZE}-channel tensor, got {}",
            tensor.channels
        )));
    }
    let m = tensor.m;
    let channels = ALPHABET_SIZE + m;
    let mut data = vec![0.0; tensor.slices * m * channels];
    for s in 0..tensor.slices {
        for j in 0..m {
            let fiber = tensor.fiber(s, j);
            let base = (s * m + j) * channels;
            data[base..base + ALPHABET_SIZE].copy_from_slice(fiber);
            if fiber.iter().any(|&v| v != 0.0) {
                data[base + ALPHABET_SIZE + j] = 1.0;
            }
        }
    }
    Ok(SentTensor {
        channels,
        use_position: true,
        data,
        ..tensor.clone()
    })
}

/// Header tag of the encoded-batch dump.
pub const BATCH_MAGIC: &str = "s2m1";

/// Write tensors as `s2m1 <slices> <m> <channels> <count>\n` followed by
/// little-endian `f64`s in tensor order.
pub fn write_batch<W: Write>(mut out: W, tensors: &[SentTensor]) -> std::io::Result<()> {
    let (n, m, c) = tensors.first().map(SentTensor::shape).unwrap_or((0, 0, 0));
    if tensors.iter().any(|t| t.shape() != (n, m, c)) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "all tensors in a batch must share one shape",
        ));
    }
    writeln!(out, "{BATCH_MAGIC} {n} {m} {c} {}", tensors.len())?;
    for t in tensors {
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

/// Dimensions and flat payload of an encoded-batch dump.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub slices: usize,
    pub m: usize,
    pub channels: usize,
    pub count: usize,
    pub data: Vec<f64>,
}

impl EncodedBatch {
    pub fn sample(&self, i: usize) -> &[f64] {
        let size = self.slices * self.m * self.channels;
        &self.data[i * size..(i + 1) * size]
    }
}

pub fn read_batch<R: BufRead>(mut input: R) -> Result<EncodedBatch> {
    let mut header = String::new();
    input
        .read_line(&mut header)
        .map_err(|e| Error::data(format!("reading batch header: {e}")))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != BATCH_MAGIC {
        return Err(Error::data(format!(
            "not an encoded batch header: {header:?}"
        )));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| {
            f.parse()
                .map_err(|_| Error::data(format!("bad batch header field {f:?}")))
        })
        .collect::<Result<_>>()?;
    let total = dims[0] * dims[1] * dims[2] * dims[3];
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::data(format!("reading batch payload: {e}")))?;
    if bytes.len() != total * 8 {
        return Err(Error::data(format!(
            "batch payload has {} bytes, header implies {}",
            bytes.len(),
            total * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok(EncodedBatch {
        slices: dims[0],
        m: dims[1],
        channels: dims[2],
        count: dims[3],
        data,
    })
}
