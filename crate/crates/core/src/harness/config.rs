//! Experiment files: `[data]`, `[model]` and `[train]` sections.

use std::path::{Path, PathBuf};

use ini::Ini;

use super::data::{data_dir_from_env, DatasetSpec};
use crate::error::{Error, Result};
use crate::models::{short_digest, Arch, ModelConfig};

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per forward/backward chunk inside one optimizer batch.
    pub micro_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub validation_fraction: f64,
    pub subsample: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 512,
            micro_batch: 16,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validation_fraction: 0.05,
            subsample: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("`epochs` must be at least 1"));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("`validation_fraction` must lie in [0, 1)"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("`learning_rate` must be positive"));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("`{key}` = `{v}` is not a valid number")))
        }
        let v = value.trim();
        match key {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "micro_batch" => self.micro_batch = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "validation_fraction" => self.validation_fraction = num(key, v)?,
            "subsample" => {
                self.subsample = if v == "none" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }

    fn to_ini_lines(&self) -> String {
        let subsample = self
            .subsample
            .map_or_else(|| "none".to_owned(), |s| s.to_string());
        format!(
            "epochs = {}\nbatch_size = {}\nmicro_batch = {}\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nvalidation_fraction = {}\nsubsample = {subsample}\nseed = {}\n",
            self.epochs,
            self.batch_size,
            self.micro_batch,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            self.validation_fraction,
            self.seed
        )
    }
}

/// Epoch budget when a config leaves `epochs` unset: 50 for the small MR
/// corpus, 20 otherwise.
pub fn default_epochs(dataset: &str) -> usize {
    if dataset == "mr" {
        50
    } else {
        20
    }
}

/// Where the corpus lives: a bundled name or an explicit directory.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Builtin { name: String, data_dir: PathBuf },
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Defaults for a bundled dataset: its `n`, `m` and class count.
    pub fn for_builtin(name: &str, arch: Arch) -> Result<Self> {
        Self::resolve(
            DataSource::Builtin {
                name: name.to_owned(),
                data_dir: data_dir_from_env(),
            },
            arch,
            &[],
            TrainConfig::default(),
            false,
        )
    }

    fn resolve(
        data: DataSource,
        arch: Arch,
        model_pairs: &[(String, String)],
        mut train: TrainConfig,
        epochs_set: bool,
    ) -> Result<Self> {
        let mut model = ModelConfig::new(arch);
        if let DataSource::Builtin { name, data_dir } = &data {
            if !epochs_set {
                train.epochs = default_epochs(name);
            }
            let spec = DatasetSpec::builtin(name, data_dir)
                .ok_or_else(|| Error::config(format!("unknown dataset `{name}`")))?;
            model.n = spec.n;
            model.m = spec.m;
            model.classes = spec.classes;
        }
        for (k, v) in model_pairs {
            model.set(k, v)?;
        }
        model.seed = train.seed;
        model.validate()?;
        train.validate()?;
        Ok(ExperimentConfig { data, model, train })
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut data_pairs = Vec::new();
        let mut model_pairs = Vec::new();
        let mut train = TrainConfig::default();
        let mut epochs_set = false;
        for (section, props) in ini.iter() {
            match section {
                None if props.is_empty() => {}
                Some("data") => data_pairs.extend(
                    props
                        .iter()
                        .map(|(k, v)| (k.to_owned(), v.trim().to_owned())),
                ),
                Some("model") => {
                    model_pairs.extend(props.iter().map(|(k, v)| (k.to_owned(), v.to_owned())))
                }
                Some("train") => {
                    for (k, v) in props.iter() {
                        epochs_set |= k == "epochs";
                        train.set(k, v)?;
                    }
                }
                Some(other) => return Err(Error::config(format!("unknown section [{other}]"))),
                None => return Err(Error::config("keys outside a section")),
            }
        }
        let mut name = None;
        let mut dir = None;
        let mut data_dir = None;
        for (k, v) in data_pairs {
            match k.as_str() {
                "dataset" => name = Some(v),
                "path" => dir = Some(PathBuf::from(v)),
                "data_dir" => data_dir = Some(PathBuf::from(v)),
                _ => return Err(Error::config(format!("unknown data key `{k}`"))),
            }
        }
        let data = match (name, dir) {
            (Some(_), Some(_)) => {
                return Err(Error::config("give either `dataset` or `path`, not both"))
            }
            (None, Some(p)) => DataSource::Dir(p),
            (name, None) => DataSource::Builtin {
                name: name.unwrap_or_else(|| "mr".to_owned()),
                data_dir: data_dir.unwrap_or_else(data_dir_from_env),
            },
        };
        let arch = match model_pairs.iter().find(|(k, _)| k == "arch") {
            Some((_, v)) => v.trim().parse()?,
            None => Arch::Sent2MatrixDense,
        };
        Self::resolve(data, arch, &model_pairs, train, epochs_set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    /// The dataset this experiment reads.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        match &self.data {
            DataSource::Builtin { name, data_dir } => {
                let mut spec = DatasetSpec::builtin(name, data_dir)
                    .ok_or_else(|| Error::config(format!("unknown dataset `{name}`")))?;
                spec.n = self.model.n;
                spec.m = self.model.m;
                Ok(spec)
            }
            DataSource::Dir(dir) => {
                DatasetSpec::from_dir(dir, self.model.classes, self.model.n, self.model.m)
            }
        }
    }

    /// Use `seed` for initialization, shuffling and dropout.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.seed = seed;
    }

    pub fn to_ini_string(&self) -> String {
        let data = match &self.data {
            DataSource::Builtin { name, data_dir } => {
                format!("dataset = {name}\ndata_dir = {}\n", data_dir.display())
            }
            DataSource::Dir(p) => format!("path = {}\n", p.display()),
        };
        format!(
            "[data]\n{data}\n[model]\n{}\n[train]\n{}",
            self.model.to_ini_string(),
            self.train.to_ini_lines()
        )
    }

    /// Digest of everything except the seed and the data location.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.set_seed(0);
        let data = match &c.data {
            DataSource::Builtin { name, .. } => name.clone(),
            DataSource::Dir(p) => p
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        short_digest(&format!(
            "{data}\n{}{}",
            c.model.to_ini_string(),
            c.train.to_ini_lines()
        ))
    }

    /// `<digest>-seed<seed>`.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.digest(), self.train.seed)
    }
}
