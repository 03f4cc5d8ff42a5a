//! Corpora, experiment files and the training/evaluation loops.

pub mod config;
pub mod data;
pub mod train;

pub use config::{default_epochs, DataSource, ExperimentConfig, TrainConfig};
pub use data::{load_dataset, CsvFormat, Dataset, DatasetSpec, LabeledSentence, Split};
pub use train::{
    compare_paddings, evaluate, metrics_from_log, train, train_with_progress, EpochRecord,
    Evaluation, Metrics, PaddingComparison, Prediction, TrainOutcome, TrainReport,
};
