//! The three classifiers: the dense Sent2Matrix network and the word- and
//! character-level CNN baselines.

use std::fmt;
use std::str::FromStr;

use ini::Ini;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embedding::{
    sentence_char_matrix, sentence_tensor, word_indices, BASELINE_CHAR_VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::padding::PaddingStrategy;
use crate::text::{TokenizedSentence, WordVocab, ALPHABET_SIZE};

/// Filter widths of the word-level baseline.
pub const WORD_CNN_WIDTHS: [usize; 3] = [3, 4, 5];
/// Kernel sizes of the character-level baseline's six conv layers.
pub const CHAR_CNN_KERNELS: [usize; 6] = [7, 7, 3, 3, 3, 3];
/// Layers of the character-level baseline followed by a pool of three.
pub const CHAR_CNN_POOLED: [usize; 3] = [0, 1, 5];
pub const CHAR_CNN_POOL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Sent2MatrixDense,
    WordCnn,
    CharCnn,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Sent2MatrixDense, Arch::WordCnn, Arch::CharCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Sent2MatrixDense => "sent2matrix_dense",
            Arch::WordCnn => "word_cnn",
            Arch::CharCnn => "char_cnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture `{s}`")))
    }
}

/// Hyper-parameters of one classifier.
///
/// `initial_filters` is the stem width for the dense network, the filters
/// per width for the word CNN and the conv width for the char CNN.
/// `embed_dim` and `vocab_size` only matter to the word CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n: usize,
    pub m: usize,
    pub strategy: PaddingStrategy,
    pub use_position: bool,
    pub initial_filters: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub kernel: (usize, usize),
    pub fc_hidden: usize,
    pub classes: usize,
    pub dropout_keep: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub vocab_size: usize,
}

const KEYS: [&str; 16] = [
    "arch",
    "n",
    "m",
    "strategy",
    "use_position",
    "initial_filters",
    "blocks",
    "layers_per_block",
    "growth",
    "kernel",
    "fc_hidden",
    "classes",
    "dropout_keep",
    "seed",
    "embed_dim",
    "vocab_size",
];

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        let base = ModelConfig {
            arch,
            n: 49,
            m: 18,
            strategy: PaddingStrategy::Serpentine,
            use_position: false,
            initial_filters: 64,
            blocks: 2,
            layers_per_block: 3,
            growth: 32,
            kernel: (3, 2),
            fc_hidden: 256,
            classes: 4,
            dropout_keep: 0.5,
            seed: 0,
            embed_dim: 128,
            vocab_size: 20_000,
        };
        match arch {
            Arch::Sent2MatrixDense => base,
            Arch::WordCnn => ModelConfig {
                initial_filters: 100,
                ..base
            },
            Arch::CharCnn => ModelConfig {
                initial_filters: 256,
                fc_hidden: 1024,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("m", self.m),
            ("initial_filters", self.initial_filters),
            ("blocks", self.blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth", self.growth),
            ("kernel", self.kernel.0.min(self.kernel.1)),
            ("fc_hidden", self.fc_hidden),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("`{key}` must be at least 1")));
        }
        if self.classes < 2 {
            return Err(Error::config("`classes` must be at least 2"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("`vocab_size` must be at least 2"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::config(format!(
                "`dropout_keep` {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    /// Input channels of the Sent2Matrix tensor.
    pub fn channels(&self) -> usize {
        ALPHABET_SIZE + if self.use_position { self.m } else { 0 }
    }

    /// Columns of the character baseline's input, one separator per word.
    pub fn char_capacity(&self) -> usize {
        self.n * (self.m + 1)
    }

    fn get(&self, key: &str) -> String {
        match key {
            "arch" => self.arch.to_string(),
            "n" => self.n.to_string(),
            "m" => self.m.to_string(),
            "strategy" => self.strategy.to_string(),
            "use_position" => self.use_position.to_string(),
            "initial_filters" => self.initial_filters.to_string(),
            "blocks" => self.blocks.to_string(),
            "layers_per_block" => self.layers_per_block.to_string(),
            "growth" => self.growth.to_string(),
            "kernel" => format!("{},{}", self.kernel.0, self.kernel.1),
            "fc_hidden" => self.fc_hidden.to_string(),
            "classes" => self.classes.to_string(),
            "dropout_keep" => self.dropout_keep.to_string(),
            "seed" => self.seed.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Set one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("`{key}` = `{v}` is not a valid number")))
        }
        let v = value.trim();
        match key {
            "arch" => self.arch = v.parse()?,
            "n" => self.n = num(key, v)?,
            "m" => self.m = num(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "use_position" => self.use_position = parse_flag(key, v)?,
            "initial_filters" => self.initial_filters = num(key, v)?,
            "blocks" => self.blocks = num(key, v)?,
            "layers_per_block" => self.layers_per_block = num(key, v)?,
            "growth" => self.growth = num(key, v)?,
            "kernel" => {
                let (a, b) = v.split_once(',').ok_or_else(|| {
                    Error::config(format!("`kernel` = `{v}` should read `k1,k2`"))
                })?;
                self.kernel = (num(key, a.trim())?, num(key, b.trim())?);
            }
            "fc_hidden" => self.fc_hidden = num(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "dropout_keep" => self.dropout_keep = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            _ => return Err(Error::config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Apply key/value pairs on top of the defaults for their `arch`.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let arch = match pairs.iter().find(|(k, _)| *k == "arch") {
            Some((_, v)) => v.trim().parse()?,
            None => Arch::Sent2MatrixDense,
        };
        let mut config = ModelConfig::new(arch);
        for (k, v) in pairs {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Flat `key = value` lines in a fixed order.
    pub fn to_ini_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    /// Parse a flat key/value file; a single `[model]` section is accepted too.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut pairs = Vec::new();
        for (section, props) in ini.iter() {
            match section {
                None | Some("model") => pairs.extend(props.iter()),
                Some(other) => return Err(Error::config(format!("unexpected section [{other}]"))),
            }
        }
        Self::from_pairs(pairs)
    }

    /// Hex SHA-256 prefix of the canonical serialization.
    pub fn digest(&self) -> String {
        short_digest(&self.to_ini_string())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(Arch::Sent2MatrixDense)
    }
}

pub(crate) fn parse_flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}` = `{v}` is not on/off"))),
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn short_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Network {
    Dense {
        stem: Affine,
        blocks: Vec<Vec<Affine>>,
        /// Zero rows/columns added at the bottom/right before each pooling.
        pool_pads: Vec<[usize; 4]>,
        layer_pads: [usize; 4],
        fc1: Affine,
        fc2: Affine,
    },
    Word {
        table: ParamId,
        banks: Vec<Affine>,
        out: Affine,
    },
    Char {
        convs: Vec<Affine>,
        fc1: Affine,
        fc2: Affine,
        out: Affine,
    },
}

/// A batch encoded for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    /// `[B, C, m, slices]` Sent2Matrix tensors, channel-first.
    Grid(Tensor),
    /// Row-major `B x n` word indices.
    Words {
        indices: Vec<Option<usize>>,
        n: usize,
    },
    /// `[B, 27, m_s]` character one-hots.
    Chars(Tensor),
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        match self {
            ModelInput::Grid(t) | ModelInput::Chars(t) => t.shape()[0],
            ModelInput::Words { indices, n } => indices.len() / n,
        }
    }
}

/// Layer graph plus parameters. Parameter names are unique and each
/// learnable tensor is registered once.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    network: Network,
    vocab: Option<WordVocab>,
    pub params: ParamStore,
}

fn affine<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    w_shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Affine> {
    let w = store.add_uniform(format!("{name}.w"), w_shape, fan_in, rng)?;
    let b = store.add_zeros(format!("{name}.b"), &w_shape[..1])?;
    Ok(Affine { w, b })
}

/// Zero padding that keeps a `k1 x k2` valid convolution size-preserving;
/// odd remainders go to the bottom and right.
pub fn same_pads(k1: usize, k2: usize) -> [usize; 4] {
    let (top, left) = ((k1 - 1) / 2, (k2 - 1) / 2);
    [top, k1 - 1 - top, left, k2 - 1 - left]
}

/// Shapes the dense network produces, `(channels, height, width)` after the
/// stem and after each block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensePlan {
    pub input: (usize, usize, usize),
    pub stem: (usize, usize, usize),
    pub blocks: Vec<(usize, usize, usize)>,
    pub flat: usize,
}

pub fn dense_plan(config: &ModelConfig) -> Result<DensePlan> {
    config.validate()?;
    let (k1, k2) = config.kernel;
    let (h, w) = (config.m, config.strategy.slice_capacity(config.n));
    if k1 > h || k2 > w {
        return Err(Error::config(format!(
            "kernel {k1}x{k2} does not fit a {h}x{w} input"
        )));
    }
    let stem = (config.initial_filters, h - k1 + 1, (w - k2) / 2 + 1);
    let (mut c, mut h, mut w) = stem;
    let mut blocks = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        if b > 0 {
            if h < 2 || w < 2 {
                return Err(Error::config(format!(
                    "a {h}x{w} feature map cannot be pooled before block {}",
                    b + 1
                )));
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        c += config.layers_per_block * config.growth;
        blocks.push((c, h, w));
    }
    Ok(DensePlan {
        input: (
            config.channels(),
            config.m,
            config.strategy.slice_capacity(config.n),
        ),
        stem,
        blocks,
        flat: c * h * w,
    })
}

/// Sequence lengths through the char CNN: after each conv and its pooling.
pub fn char_plan(config: &ModelConfig) -> Result<Vec<usize>> {
    let mut len = config.char_capacity();
    let mut lens = Vec::new();
    for (i, &k) in CHAR_CNN_KERNELS.iter().enumerate() {
        if k > len {
            return Err(Error::config(format!(
                "char CNN layer {} kernel {k} longer than its input {len}",
                i + 1
            )));
        }
        len = len - k + 1;
        if CHAR_CNN_POOLED.contains(&i) {
            if len < CHAR_CNN_POOL {
                return Err(Error::config(format!(
                    "char CNN pooling after layer {} underflows",
                    i + 1
                )));
            }
            len /= CHAR_CNN_POOL;
        }
        lens.push(len);
    }
    Ok(lens)
}

impl Model {
    /// Build with freshly initialized parameters. The word CNN needs the
    /// vocabulary its indices refer to.
    pub fn build(config: ModelConfig, vocab: Option<WordVocab>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let network = match config.arch {
            Arch::Sent2MatrixDense => build_dense(&config, &mut store, &mut rng)?,
            Arch::WordCnn => {
                let v = vocab
                    .as_ref()
                    .ok_or_else(|| Error::config("the word CNN needs a word vocabulary"))?;
                build_word(&config, v.len(), &mut store, &mut rng)?
            }
            Arch::CharCnn => build_char(&config, &mut store, &mut rng)?,
        };
        let vocab = if config.arch == Arch::WordCnn {
            vocab
        } else {
            None
        };
        Ok(Model {
            config,
            network,
            vocab,
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Option<&WordVocab> {
        self.vocab.as_ref()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Encode sentences into this architecture's input layout.
    pub fn encode(&self, sentences: &[&TokenizedSentence]) -> Result<ModelInput> {
        if sentences.is_empty() {
            return Err(Error::invalid("cannot encode an empty batch"));
        }
        let c = &self.config;
        let b = sentences.len();
        match c.arch {
            Arch::Sent2MatrixDense => {
                let slices = c.strategy.slice_capacity(c.n);
                let per = c.channels() * c.m * slices;
                let mut data = vec![0.0; b * per];
                for (s, chunk) in sentences.iter().zip(data.chunks_exact_mut(per)) {
                    sentence_tensor(s, c.n, c.m, c.strategy, c.use_position)?
                        .write_channels_first(chunk);
                }
                Ok(ModelInput::Grid(Tensor::new(
                    vec![b, c.channels(), c.m, slices],
                    data,
                )?))
            }
            Arch::WordCnn => {
                let vocab = self.vocab.as_ref().expect("word CNN has a vocabulary");
                let indices = sentences
                    .iter()
                    .flat_map(|s| word_indices(s, vocab, c.n))
                    .collect();
                Ok(ModelInput::Words { indices, n: c.n })
            }
            Arch::CharCnn => {
                let m_s = c.char_capacity();
                let mut data = Vec::with_capacity(b * BASELINE_CHAR_VOCAB_SIZE * m_s);
                for s in sentences {
                    data.extend(sentence_char_matrix(s, m_s)?.values);
                }
                Ok(ModelInput::Chars(Tensor::new(
                    vec![b, BASELINE_CHAR_VOCAB_SIZE, m_s],
                    data,
                )?))
            }
        }
    }

    /// Record the forward pass on `tape` and return the `[B, classes]` logits.
    /// The tape must have been created on `self.params.values()`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        forward(&self.config, &self.network, tape, input, training, rng)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new(self.params.values());
        // Never drawn from outside training.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut tape, input, false, &mut rng)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(input)?))
    }

    /// Summed cross-entropy over `denom` with gradients accumulated into
    /// `self.params`; returns the loss and the logits.
    pub fn accumulate_gradients<R: Rng>(
        &mut self,
        input: &ModelInput,
        labels: &[usize],
        denom: usize,
        rng: &mut R,
    ) -> Result<(f64, Tensor)> {
        let (values, grads) = self.params.split_mut();
        let mut tape = Tape::new(values);
        let logits = forward(&self.config, &self.network, &mut tape, input, true, rng)?;
        let loss = tape.softmax_xent_over(logits, labels, denom)?;
        tape.backward(loss, grads)?;
        Ok((tape.value(loss).data()[0], tape.value(logits).clone()))
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

fn build_dense<R: Rng>(
    config: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<Network> {
    let plan = dense_plan(config)?;
    let (k1, k2) = config.kernel;
    let c0 = plan.input.0;
    let stem = affine(
        store,
        "stem",
        &[config.initial_filters, c0, k1, k2],
        c0 * k1 * k2,
        rng,
    )?;
    let mut blocks = Vec::with_capacity(config.blocks);
    let mut pool_pads = Vec::new();
    let (mut c, mut h, mut w) = plan.stem;
    for b in 0..config.blocks {
        if b > 0 {
            pool_pads.push([0, h % 2, 0, w % 2]);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let mut layers = Vec::with_capacity(config.layers_per_block);
        for l in 0..config.layers_per_block {
            let name = format!("block{}.layer{}", b + 1, l + 1);
            layers.push(affine(
                store,
                &name,
                &[config.growth, c, k1, k2],
                c * k1 * k2,
                rng,
            )?);
            c += config.growth;
        }
        blocks.push(layers);
    }
    let fc1 = affine(store, "fc1", &[config.fc_hidden, plan.flat], plan.flat, rng)?;
    let fc2 = affine(
        store,
        "fc2",
        &[config.classes, config.fc_hidden],
        config.fc_hidden,
        rng,
    )?;
    Ok(Network::Dense {
        stem,
        blocks,
        pool_pads,
        layer_pads: same_pads(k1, k2),
        fc1,
        fc2,
    })
}

fn build_word<R: Rng>(
    config: &ModelConfig,
    vocab_len: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<Network> {
    let widest = *WORD_CNN_WIDTHS.iter().max().expect("non-empty");
    if config.n < widest {
        return Err(Error::config(format!(
            "word CNN needs n >= {widest}, got {}",
            config.n
        )));
    }
    let d = config.embed_dim;
    let table = store.add_uniform("embedding", &[d, vocab_len], 1, rng)?;
    let f = config.initial_filters;
    let banks = WORD_CNN_WIDTHS
        .iter()
        .map(|&h| affine(store, &format!("conv{h}"), &[f, d, h], d * h, rng))
        .collect::<Result<Vec<_>>>()?;
    let width = f * WORD_CNN_WIDTHS.len();
    let out = affine(store, "out", &[config.classes, width], width, rng)?;
    Ok(Network::Word { table, banks, out })
}

fn build_char<R: Rng>(
    config: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<Network> {
    let lens = char_plan(config)?;
    let f = config.initial_filters;
    let mut convs = Vec::with_capacity(CHAR_CNN_KERNELS.len());
    let mut c = BASELINE_CHAR_VOCAB_SIZE;
    for (i, &k) in CHAR_CNN_KERNELS.iter().enumerate() {
        convs.push(affine(
            store,
            &format!("conv{}", i + 1),
            &[f, c, k],
            c * k,
            rng,
        )?);
        c = f;
    }
    let flat = f * lens.last().expect("six layers");
    let hidden = config.fc_hidden;
    let fc1 = affine(store, "fc1", &[hidden, flat], flat, rng)?;
    let fc2 = affine(store, "fc2", &[hidden, hidden], hidden, rng)?;
    let out = affine(store, "out", &[config.classes, hidden], hidden, rng)?;
    Ok(Network::Char {
        convs,
        fc1,
        fc2,
        out,
    })
}

fn apply(tape: &mut Tape, x: NodeId, a: Affine) -> Result<NodeId> {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.linear(x, w, b)
}

fn conv2d(tape: &mut Tape, x: NodeId, a: Affine, sh: usize, sw: usize) -> Result<NodeId> {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.conv2d(x, w, b, sh, sw)
}

fn conv1d(tape: &mut Tape, x: NodeId, a: Affine) -> Result<NodeId> {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.conv1d(x, w, b, 1)
}

fn forward<R: Rng>(
    config: &ModelConfig,
    network: &Network,
    tape: &mut Tape,
    input: &ModelInput,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let keep = config.dropout_keep;
    match (network, input) {
        (
            Network::Dense {
                stem,
                blocks,
                pool_pads,
                layer_pads,
                fc1,
                fc2,
            },
            ModelInput::Grid(x),
        ) => {
            let xi = tape.input(x.clone());
            let s = conv2d(tape, xi, *stem, 1, 2)?;
            let mut h = tape.relu(s);
            for (b, layers) in blocks.iter().enumerate() {
                if b > 0 {
                    let padded = tape.pad2d(h, pool_pads[b - 1])?;
                    h = tape.avg_pool2d(padded, 2, 2)?;
                }
                for &layer in layers {
                    let padded = tape.pad2d(h, *layer_pads)?;
                    let c = conv2d(tape, padded, layer, 1, 1)?;
                    let r = tape.relu(c);
                    h = tape.concat_channels(h, r)?;
                }
            }
            let flat = tape.flatten(h);
            let hidden = apply(tape, flat, *fc1)?;
            let hidden = tape.relu(hidden);
            let dropped = tape.dropout(hidden, keep, rng, training)?;
            apply(tape, dropped, *fc2)
        }
        (Network::Word { table, banks, out }, ModelInput::Words { indices, n }) => {
            let t = tape.param(*table);
            let e = tape.embedding(t, indices, *n)?;
            let mut features: Option<NodeId> = None;
            for &bank in banks {
                let c = conv1d(tape, e, bank)?;
                let r = tape.relu(c);
                let len = *tape.shape(r).last().expect("rank 3");
                let pooled = tape.max_pool1d(r, len)?;
                features = Some(match features {
                    None => pooled,
                    Some(f) => tape.concat_channels(f, pooled)?,
                });
            }
            let flat = tape.flatten(features.expect("three banks"));
            let dropped = tape.dropout(flat, keep, rng, training)?;
            apply(tape, dropped, *out)
        }
        (
            Network::Char {
                convs,
                fc1,
                fc2,
                out,
            },
            ModelInput::Chars(x),
        ) => {
            let mut h = tape.input(x.clone());
            for (i, &layer) in convs.iter().enumerate() {
                let c = conv1d(tape, h, layer)?;
                h = tape.relu(c);
                if CHAR_CNN_POOLED.contains(&i) {
                    h = tape.max_pool1d(h, CHAR_CNN_POOL)?;
                }
            }
            let mut h = tape.flatten(h);
            for layer in [fc1, fc2] {
                let a = apply(tape, h, *layer)?;
                let r = tape.relu(a);
                h = tape.dropout(r, keep, rng, training)?;
            }
            apply(tape, h, *out)
        }
        _ => Err(Error::shape(format!(
            "{} model given an input of the wrong kind",
            config.arch
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::sentence_tensor;
    use crate::text::build_word_vocab;

    fn sentences(texts: &[&str]) -> Vec<TokenizedSentence> {
        texts
            .iter()
            .map(|t| TokenizedSentence::from_raw(t))
            .collect()
    }

    fn small_dense() -> ModelConfig {
        ModelConfig {
            n: 4,
            m: 6,
            initial_filters: 4,
            growth: 3,
            layers_per_block: 2,
            fc_hidden: 8,
            classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stem_width_for_short_sentences() {
        let config = ModelConfig {
            n: 3,
            m: 4,
            initial_filters: 8,
            ..ModelConfig::default()
        };
        let plan = dense_plan(&config).unwrap();
        assert_eq!(plan.input, (26, 4, 4));
        assert_eq!(plan.stem, (8, 2, 2));
    }

    #[test]
    fn dense_block_channel_law() {
        let plan = dense_plan(&ModelConfig::default()).unwrap();
        assert_eq!(plan.stem.0, 64);
        assert_eq!(plan.blocks[0].0, 64 + 3 * 32);
        assert_eq!(plan.blocks[1].0, 160 + 3 * 32);
        let c = small_dense();
        let plan = dense_plan(&c).unwrap();
        for (i, block) in plan.blocks.iter().enumerate() {
            let before = if i == 0 {
                plan.stem.0
            } else {
                plan.blocks[i - 1].0
            };
            assert_eq!(block.0, before + c.layers_per_block * c.growth);
        }
    }

    #[test]
    fn pooling_underflow_is_a_config_error() {
        let config = ModelConfig {
            n: 2,
            m: 3,
            kernel: (3, 2),
            ..ModelConfig::default()
        };
        assert!(matches!(dense_plan(&config), Err(Error::Config(_))));
        assert!(Model::build(config, None).is_err());
    }

    /// Parameter count recomputed from the layer list by hand.
    fn dense_count_oracle(c: &ModelConfig) -> usize {
        let (k1, k2) = c.kernel;
        let slices = c.strategy.slice_capacity(c.n);
        let mut h = c.m - k1 + 1;
        let mut w = (slices - k2) / 2 + 1;
        let mut ch = c.initial_filters;
        let mut total = c.initial_filters * c.channels() * k1 * k2 + c.initial_filters;
        for b in 0..c.blocks {
            if b > 0 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            for _ in 0..c.layers_per_block {
                total += c.growth * ch * k1 * k2 + c.growth;
                ch += c.growth;
            }
        }
        total + (ch * h * w + 1) * c.fc_hidden + (c.fc_hidden + 1) * c.classes
    }

    #[test]
    fn parameter_counts() {
        let default = ModelConfig::default();
        let model = Model::build(default.clone(), None).unwrap();
        assert_eq!(model.num_parameters(), dense_count_oracle(&default));
        assert_eq!(model.num_parameters(), 12_760_324);
        for position in [false, true] {
            for strategy in PaddingStrategy::ALL {
                let c = ModelConfig {
                    strategy,
                    use_position: position,
                    n: 51,
                    classes: 2,
                    ..small_dense()
                };
                assert_eq!(
                    Model::build(c.clone(), None).unwrap().num_parameters(),
                    dense_count_oracle(&c)
                );
            }
        }
        let char_cfg = ModelConfig::new(Arch::CharCnn);
        assert_eq!(char_cfg.char_capacity(), 931);
        assert_eq!(char_plan(&char_cfg).unwrap(), [308, 100, 98, 96, 94, 30]);
    }

    #[test]
    fn dense_forward_is_finite() {
        let model = Model::build(small_dense(), None).unwrap();
        let sents = sentences(&["the cat sat on the mat", "", "a"]);
        let refs: Vec<&TokenizedSentence> = sents.iter().collect();
        let input = model.encode(&refs).unwrap();
        let logits = model.logits(&input).unwrap();
        assert_eq!(logits.shape(), [3, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        // The empty sentence encodes to zeros.
        let ModelInput::Grid(x) = &input else {
            panic!()
        };
        let per = x.len() / 3;
        assert!(x.data()[per..2 * per].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_dense_forward_on_zeros() {
        let model = Model::build(ModelConfig::default(), None).unwrap();
        let plan = dense_plan(model.config()).unwrap();
        let (c, h, w) = plan.input;
        let logits = model
            .logits(&ModelInput::Grid(Tensor::zeros(&[1, c, h, w])))
            .unwrap();
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn odd_widths_are_padded_before_pooling() {
        let config = ModelConfig {
            strategy: PaddingStrategy::Zero,
            n: 5,
            m: 7,
            ..small_dense()
        };
        let plan = dense_plan(&config).unwrap();
        assert_eq!(plan.stem, (4, 5, 2));
        assert_eq!(plan.blocks[1], (4 + 12, 3, 1));
        let model = Model::build(config, None).unwrap();
        let s = sentences(&["odd widths here"]);
        let logits = model.logits(&model.encode(&[&s[0]]).unwrap()).unwrap();
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stem_windows_pair_a_word_with_its_reversed_successor() {
        let config = ModelConfig {
            n: 5,
            m: 5,
            ..ModelConfig::default()
        };
        let sent = TokenizedSentence::from_raw("one two three four");
        let tensor = sentence_tensor(&sent, config.n, config.m, config.strategy, false).unwrap();
        // Filter 0 sees only the left column of each window, filter 1 the right.
        let mut w = Tensor::zeros(&[2, 26, 1, 2]);
        for c in 0..26 {
            w.set(&[0, c, 0, 0], 1.0);
            w.set(&[1, c, 0, 1], 1.0);
        }
        let x = Tensor::new(vec![1, 26, 5, tensor.slices], tensor.to_channels_first()).unwrap();
        let y = crate::nn::ops::conv2d(
            &x.reshape(&[26, 5, tensor.slices]).unwrap(),
            &w,
            &Tensor::zeros(&[2]),
            1,
            2,
        )
        .unwrap();
        let texts =
            crate::embedding::sentence_slices(&sent, config.n, config.m, config.strategy).unwrap();
        for t in 0..y.shape()[2] {
            let (left, right) = (&texts[2 * t], &texts[2 * t + 1]);
            for i in 0..5 {
                assert_eq!(
                    y.get(&[0, i, t]),
                    f64::from(u8::from(tensor.decode_slice(2 * t)[i].is_some()))
                );
                assert_eq!(
                    y.get(&[1, i, t]),
                    f64::from(u8::from(tensor.decode_slice(2 * t + 1)[i].is_some()))
                );
            }
            if let (Some(l), Some(r)) = (left, right) {
                let words = ["one", "two", "three", "four"];
                let k = words.iter().position(|w| w == l).unwrap();
                let successor: String = words[k + 1].chars().rev().collect();
                assert_eq!(r, &successor);
            }
        }
    }

    #[test]
    fn word_cnn_shapes() {
        let corpus = sentences(&["good film", "bad film", "a truly good film"]);
        let vocab = build_word_vocab(corpus.iter(), 10).unwrap();
        let config = ModelConfig {
            n: 6,
            embed_dim: 5,
            initial_filters: 4,
            classes: 2,
            ..ModelConfig::new(Arch::WordCnn)
        };
        assert!(Model::build(config.clone(), None).is_err());
        let model = Model::build(config, Some(vocab.clone())).unwrap();
        let expected =
            5 * vocab.len() + (4 * 5 * 3 + 4) + (4 * 5 * 4 + 4) + (4 * 5 * 5 + 4) + 12 * 2 + 2;
        assert_eq!(model.num_parameters(), expected);
        let one_word = TokenizedSentence::from_raw("good");
        let input = model.encode(&[&corpus[0], &one_word]).unwrap();
        let logits = model.logits(&input).unwrap();
        assert_eq!(logits.shape(), [2, 2]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        let short = ModelConfig {
            n: 4,
            ..model.config().clone()
        };
        assert!(Model::build(short, Some(vocab)).is_err());
    }

    #[test]
    fn word_cnn_matches_layer_by_layer_oracle() {
        let corpus = sentences(&["good film", "bad film very bad"]);
        let vocab = build_word_vocab(corpus.iter(), 10).unwrap();
        let config = ModelConfig {
            n: 5,
            embed_dim: 3,
            initial_filters: 2,
            classes: 2,
            seed: 9,
            ..ModelConfig::new(Arch::WordCnn)
        };
        let model = Model::build(config, Some(vocab.clone())).unwrap();
        let input = model.encode(&[&corpus[1]]).unwrap();
        let got = model.logits(&input).unwrap();

        let p = |name: &str| {
            model
                .params
                .value(model.params.id_of(name).unwrap())
                .clone()
        };
        let table = p("embedding");
        let idx = word_indices(&corpus[1], &vocab, 5);
        let mut features = Vec::new();
        for h in WORD_CNN_WIDTHS {
            let (w, b) = (p(&format!("conv{h}.w")), p(&format!("conv{h}.b")));
            for f in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for t in 0..=5 - h {
                    let mut acc = b.get(&[f]);
                    for r in 0..3 {
                        for q in 0..h {
                            if let Some(i) = idx[t + q] {
                                acc += w.get(&[f, r, q]) * table.get(&[r, i]);
                            }
                        }
                    }
                    best = best.max(acc.max(0.0));
                }
                features.push(best);
            }
        }
        let (w, b) = (p("out.w"), p("out.b"));
        for k in 0..2 {
            let want: f64 = b.get(&[k]) + (0..6).map(|j| w.get(&[k, j]) * features[j]).sum::<f64>();
            assert!((got.get(&[0, k]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn char_cnn_forward_is_finite() {
        let config = ModelConfig {
            n: 14,
            m: 8,
            initial_filters: 4,
            fc_hidden: 6,
            classes: 5,
            ..ModelConfig::new(Arch::CharCnn)
        };
        assert_eq!(char_plan(&config).unwrap().last(), Some(&1));
        let model = Model::build(config, None).unwrap();
        let s = sentences(&["characters all the way down", ""]);
        let logits = model
            .logits(&model.encode(&[&s[0], &s[1]]).unwrap())
            .unwrap();
        assert_eq!(logits.shape(), [2, 5]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        let tiny = ModelConfig {
            n: 3,
            m: 3,
            ..ModelConfig::new(Arch::CharCnn)
        };
        assert!(char_plan(&tiny).is_err());
    }

    #[test]
    fn wrong_input_kind_is_rejected() {
        let model = Model::build(small_dense(), None).unwrap();
        let bad = ModelInput::Chars(Tensor::zeros(&[1, 27, 10]));
        assert!(model.logits(&bad).is_err());
    }

    #[test]
    fn predict_examples() {
        let t = |d: &[f64]| Tensor::new(vec![d.len() / 2, 2], d.to_vec()).unwrap();
        assert_eq!(argmax_rows(&t(&[0.1, 0.9])), [1]);
        assert_eq!(argmax_rows(&t(&[0.5, 0.5])), [0]);
        assert_eq!(argmax_rows(&t(&[0.1, 0.9, 2.0, -1.0])), [1, 0]);
    }

    #[test]
    fn config_round_trips_through_ini() {
        let config = ModelConfig {
            strategy: PaddingStrategy::Cyclic,
            use_position: true,
            kernel: (5, 4),
            dropout_keep: 0.75,
            seed: 42,
            ..ModelConfig::new(Arch::CharCnn)
        };
        let text = config.to_ini_string();
        assert_eq!(ModelConfig::from_ini_str(&text).unwrap(), config);
        assert_eq!(
            ModelConfig::from_ini_str(&format!("[model]\n{text}")).unwrap(),
            config
        );
        assert!(ModelConfig::from_ini_str("colour = blue\n").is_err());
        assert!(ModelConfig::from_ini_str("classes = 1\n").is_err());
        assert!(ModelConfig::from_ini_str("kernel = 3\n").is_err());
        assert!(ModelConfig::from_ini_str("dropout_keep = 0\n").is_err());
        let wc = ModelConfig::from_ini_str("arch = word_cnn\n").unwrap();
        assert_eq!(wc.initial_filters, 100);
        assert_ne!(config.digest(), ModelConfig::default().digest());
        assert_eq!(config.digest(), config.clone().digest());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn predict_ignores_positive_rescaling(
                rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 4), 1..6),
                scale in 1e-3f64..1e3,
            ) {
                let flat: Vec<f64> = rows.concat();
                let a = Tensor::new(vec![rows.len(), 4], flat.clone()).unwrap();
                let b = Tensor::new(vec![rows.len(), 4], flat.iter().map(|v| v * scale).collect()).unwrap();
                prop_assert_eq!(argmax_rows(&a), argmax_rows(&b));
            }
        }
    }
}
