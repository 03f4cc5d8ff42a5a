//! Browser bindings: fold grids, word padding layouts and sentence tensors.

use wasm_bindgen::prelude::*;

use sent2matrix::embedding::{sentence_slices, sentence_tensor, SentTensor};
use sent2matrix::padding::{fold_render, layout_render, PaddingStrategy, WordPadding};
use sent2matrix::text::{normalize, TokenizedSentence};

fn strategy(name: &str) -> Result<PaddingStrategy, JsError> {
    name.parse()
        .map_err(|e: sent2matrix::Error| JsError::new(&e.to_string()))
}

/// Serpentine fold of `text`, one row per slice; cyclic fill is upper case.
#[wasm_bindgen(js_name = foldGrid)]
pub fn fold_grid(text: &str, m: usize) -> String {
    let sentence = TokenizedSentence::from_raw(text);
    fold_render(&sentence.words, m)
}

/// Every word under zero padding (`.` marks empty cells) next to cyclic
/// padding, one line per word.
#[wasm_bindgen(js_name = wordLayouts)]
pub fn word_layouts(text: &str, m: usize) -> String {
    let sentence = TokenizedSentence::from_raw(text);
    let zero = layout_render(&sentence.words, m, WordPadding::Zero);
    let cyclic = layout_render(&sentence.words, m, WordPadding::Cyclic);
    zero.lines()
        .zip(cyclic.lines())
        .map(|(z, c)| format!("{z}   {c}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The normalized form the encoder sees.
#[wasm_bindgen(js_name = normalizeText)]
pub fn normalize_text(text: &str) -> String {
    normalize(text)
}

/// A sentence tensor with per-cell lookups for drawing.
#[wasm_bindgen]
pub struct EncodedSentence {
    tensor: SentTensor,
    texts: Vec<Option<String>>,
}

#[wasm_bindgen]
impl EncodedSentence {
    #[wasm_bindgen(constructor)]
    pub fn new(
        text: &str,
        n: usize,
        m: usize,
        strategy_name: &str,
        position: bool,
    ) -> Result<EncodedSentence, JsError> {
        let s = strategy(strategy_name)?;
        let sentence = TokenizedSentence::from_raw(text);
        let tensor = sentence_tensor(&sentence, n, m, s, position)
            .map_err(|e| JsError::new(&e.to_string()))?;
        let texts =
            sentence_slices(&sentence, n, m, s).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(EncodedSentence { tensor, texts })
    }

    pub fn slices(&self) -> usize {
        self.tensor.slices
    }

    pub fn width(&self) -> usize {
        self.tensor.m
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels
    }

    /// Letter index hot at a cell, or -1 for an empty cell.
    pub fn letter(&self, slice: usize, col: usize) -> i32 {
        self.tensor.fiber(slice, col)[..26]
            .iter()
            .position(|&v| v != 0.0)
            .map_or(-1, |i| i as i32)
    }

    /// Position channel hot at a cell, or -1.
    pub fn position(&self, slice: usize, col: usize) -> i32 {
        if !self.tensor.use_position {
            return -1;
        }
        self.tensor.fiber(slice, col)[26..]
            .iter()
            .position(|&v| v != 0.0)
            .map_or(-1, |i| i as i32)
    }

    /// The word a slice holds, empty for padding slices.
    #[wasm_bindgen(js_name = sliceText)]
    pub fn slice_text(&self, slice: usize) -> String {
        self.texts[slice].clone().unwrap_or_default()
    }

    /// Count of non-zero entries; one per filled cell, two with positions.
    #[wasm_bindgen(js_name = nonZero)]
    pub fn non_zero(&self) -> usize {
        self.tensor.data.iter().filter(|&&v| v != 0.0).count()
    }
}
