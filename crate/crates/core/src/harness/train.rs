//! Training, evaluation and the padding comparison.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::data::{Dataset, LabeledSentence};
use crate::error::{Error, Result};
use crate::models::{Arch, Model};
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::{adam_step, AdamConfig};
use crate::padding::PaddingStrategy;
use crate::text::{build_word_vocab, TokenizedSentence};

/// Samples per chunk when only forward passes are needed.
const EVAL_CHUNK: usize = 64;

// Independent ChaCha streams drawn from one seed.
const SPLIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fraction correct; `accuracy == correct / total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_pairs<I: IntoIterator<Item = (usize, usize)>>(pairs: I) -> Result<Self> {
        let (mut correct, mut total) = (0, 0);
        for (truth, pred) in pairs {
            total += 1;
            correct += usize::from(truth == pred);
        }
        if total == 0 {
            return Err(Error::invalid("accuracy of an empty split"));
        }
        Ok(Metrics {
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub index: usize,
    pub truth: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    /// `index,true,pred` lines under a header.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("index,true,pred\n");
        for p in &self.predictions {
            let _ = writeln!(out, "{},{},{}", p.index, p.truth, p.predicted);
        }
        out
    }
}

/// Recount accuracy from a prediction log.
pub fn metrics_from_log(log: &str) -> Result<Metrics> {
    let mut rdr = csv::Reader::from_reader(log.as_bytes());
    let mut pairs = Vec::new();
    for record in rdr.records() {
        let r = record.map_err(|e| Error::data(format!("prediction log: {e}")))?;
        let field = |i: usize| -> Result<usize> {
            r.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data("prediction log: bad row"))
        };
        pairs.push((field(1)?, field(2)?));
    }
    Metrics::from_pairs(pairs)
}

/// Evaluation-mode accuracy over every sample.
pub fn evaluate(model: &Model, samples: &[LabeledSentence]) -> Result<Evaluation> {
    let refs: Vec<&LabeledSentence> = samples.iter().collect();
    evaluate_refs(model, &refs)
}

fn evaluate_refs(model: &Model, samples: &[&LabeledSentence]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let sentences: Vec<&TokenizedSentence> = chunk.iter().map(|s| &s.sentence).collect();
        let predicted = model.predict(&model.encode(&sentences)?)?;
        for (i, (s, p)) in chunk.iter().zip(predicted).enumerate() {
            predictions.push(Prediction {
                index: c * EVAL_CHUNK + i,
                truth: s.label,
                predicted: p,
            });
        }
    }
    let metrics = Metrics::from_pairs(predictions.iter().map(|p| (p.truth, p.predicted)))?;
    Ok(Evaluation {
        metrics,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub test_accuracy: Option<f64>,
    pub seed: u64,
    pub config_digest: String,
    pub parameters: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    /// Not part of [`TrainReport::render`], which must be reproducible.
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// One line per epoch then a summary block, fields in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let val = e
                .validation_accuracy
                .map_or_else(|| "none".to_owned(), |v| v.to_string());
            let _ = writeln!(
                out,
                "epoch={} train_loss={} train_accuracy={} validation_accuracy={val}",
                e.epoch, e.train_loss, e.train_accuracy
            );
        }
        let test = self
            .test_accuracy
            .map_or_else(|| "none".to_owned(), |v| v.to_string());
        let _ = write!(
            out,
            "[summary]\nseed={}\nconfig_digest={}\nparameters={}\nepochs={}\ntrain_samples={}\nvalidation_samples={}\ntest_samples={}\ntest_accuracy={test}\n",
            self.seed,
            self.config_digest,
            self.parameters,
            self.epochs.len(),
            self.train_samples,
            self.validation_samples,
            self.test_samples,
        );
        out
    }

    pub fn final_train_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_accuracy)
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    pub test_evaluation: Option<Evaluation>,
    /// Per-run directory, when artifacts were written.
    pub run_dir: Option<PathBuf>,
}

pub const CONFIG_FILE: &str = "config.ini";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training examples, validation examples, in seeded order.
fn split_indices(config: &ExperimentConfig, available: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut stream(config.train.seed, SPLIT_STREAM));
    if let Some(k) = config.train.subsample {
        if k == 0 || k > available {
            return Err(Error::invalid(format!(
                "subsample {k} outside 1..={available}"
            )));
        }
        order.truncate(k);
    }
    let held = (order.len() as f64 * config.train.validation_fraction).floor() as usize;
    let train = order.split_off(held);
    if train.is_empty() {
        return Err(Error::invalid(
            "no training samples left after the validation split",
        ));
    }
    Ok((train, order))
}

/// Train on `data.train`, score `data.test`, and when `out` is given write
/// every artifact under `out/<run name>/`.
pub fn train(
    config: &ExperimentConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with_progress(config, data, out, &mut |_| ControlFlow::Continue(()))
}

/// As [`train`], reporting each finished epoch. Returning `Break` ends
/// training after that epoch's checkpoint.
pub fn train_with_progress(
    config: &ExperimentConfig,
    data: &Dataset,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.train.validate()?;
    let tc = &config.train;
    let (train_idx, val_idx) = split_indices(config, data.train.len())?;
    let train_set: Vec<&LabeledSentence> =
        train_idx.iter().map(|&i| &data.train.samples[i]).collect();
    let val_set: Vec<&LabeledSentence> = val_idx.iter().map(|&i| &data.train.samples[i]).collect();

    let vocab = match config.model.arch {
        Arch::WordCnn => Some(build_word_vocab(
            train_set.iter().map(|s| &s.sentence),
            config.model.vocab_size,
        )?),
        _ => None,
    };
    let mut model = Model::build(config.model.clone(), vocab)?;
    let digest = config.digest();

    let run_dir = match out {
        Some(base) => {
            let dir = base.join(config.run_name());
            fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join(CONFIG_FILE), &config.to_ini_string())?;
            if let Some(v) = model.vocab() {
                write_file(&dir.join(VOCAB_FILE), &v.dump())?;
            }
            Some(dir)
        }
        None => None,
    };

    let adam = AdamConfig {
        lr: tc.learning_rate,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.eps,
    };
    let mut shuffle_rng = stream(tc.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(tc.seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            model.params.zero_grads();
            for chunk in batch.chunks(tc.micro_batch) {
                let sentences: Vec<&TokenizedSentence> =
                    chunk.iter().map(|&i| &train_set[i].sentence).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
                let input = model.encode(&sentences)?;
                let (loss, _) =
                    model.accumulate_gradients(&input, &labels, batch.len(), &mut dropout_rng)?;
                loss_sum += loss * batch.len() as f64;
            }
            if !loss_sum.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss diverged in epoch {epoch}"
                )));
            }
            adam_step(&mut model.params, &adam);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: evaluate_refs(&model, &train_set)?.metrics.accuracy,
            validation_accuracy: if val_set.is_empty() {
                None
            } else {
                Some(evaluate_refs(&model, &val_set)?.metrics.accuracy)
            },
        };
        let flow = on_epoch(&record);
        epochs.push(record);
        if let Some(dir) = &run_dir {
            save_checkpoint(
                &dir.join(CHECKPOINT_DIR).join(checkpoint_name(epoch)),
                &model.params,
                &digest,
            )?;
        }
        if flow.is_break() {
            break;
        }
    }

    let test_evaluation = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.test.samples)?)
    };
    let report = TrainReport {
        epochs,
        test_accuracy: test_evaluation.as_ref().map(|e| e.metrics.accuracy),
        seed: tc.seed,
        config_digest: digest,
        parameters: model.num_parameters(),
        train_samples: train_set.len(),
        validation_samples: val_set.len(),
        test_samples: data.test.len(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &run_dir {
        write_file(&dir.join(REPORT_FILE), &report.render())?;
        write_file(
            &dir.join(TIMING_FILE),
            &format!("wall_clock_secs={}\n", report.wall_clock_secs),
        )?;
        if let Some(ev) = &test_evaluation {
            write_file(&dir.join(PREDICTIONS_FILE), &ev.log_csv())?;
        }
    }
    Ok(TrainOutcome {
        report,
        model,
        test_evaluation,
        run_dir,
    })
}

/// Test accuracy per padding strategy and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddingComparison {
    pub dataset: String,
    pub seeds: Vec<u64>,
    /// `(strategy, accuracy per seed)` in zero, cyclic, serpentine order.
    pub rows: Vec<(PaddingStrategy, Vec<f64>)>,
}

impl PaddingComparison {
    pub fn mean(&self, strategy: PaddingStrategy) -> Option<f64> {
        let (_, accs) = self.rows.iter().find(|(s, _)| *s == strategy)?;
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// A table with one row per padding method, mean first.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<20} | {:>10}",
            "Padding Method",
            format!("{} mean", self.dataset)
        );
        for s in &self.seeds {
            let _ = write!(out, " | {:>9}", format!("seed {s}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        for (strategy, accs) in &self.rows {
            let label = match strategy {
                PaddingStrategy::Zero => "Zero Padding",
                PaddingStrategy::Cyclic => "Cyclic Padding",
                PaddingStrategy::Serpentine => "Serpentine Padding",
            };
            let mean = self.mean(*strategy).expect("row exists");
            let _ = write!(out, "{label:<20} | {:>10}", format!("{:.1}%", 100.0 * mean));
            for a in accs {
                let _ = write!(out, " | {:>9}", format!("{:.1}%", 100.0 * a));
            }
            out.push('\n');
        }
        out
    }
}

/// Train the same architecture under each padding strategy for every seed.
pub fn compare_paddings(
    base: &ExperimentConfig,
    data: &Dataset,
    seeds: &[u64],
    out: Option<&Path>,
    on_run: &mut dyn FnMut(PaddingStrategy, u64, &TrainReport),
) -> Result<PaddingComparison> {
    if seeds.is_empty() {
        return Err(Error::invalid("compare_paddings needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(3);
    for strategy in PaddingStrategy::ALL {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            config.model.strategy = strategy;
            config.set_seed(seed);
            let outcome = train(&config, data, out)?;
            let acc = outcome
                .report
                .test_accuracy
                .ok_or_else(|| Error::data("padding comparison needs a test split"))?;
            on_run(strategy, seed, &outcome.report);
            accs.push(acc);
        }
        rows.push((strategy, accs));
    }
    let comparison = PaddingComparison {
        dataset: data.spec.name.clone(),
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(
            &dir.join(format!("paddings-{}.txt", base.digest())),
            &comparison.render(),
        )?;
    }
    Ok(comparison)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DataSource, TrainConfig};
    use crate::harness::data::{CsvFormat, DatasetSpec, Split};
    use crate::models::ModelConfig;
    use rand::Rng;

    const WORDS: [&str; 12] = [
        "apple", "river", "stone", "quiet", "laser", "maple", "orbit", "tiger", "plank", "fable",
        "crisp", "dune",
    ];

    fn synthetic_split(count: usize, classes: usize, seed: u64) -> Split {
        // Distinct sentences, so random labels never contradict each other.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut samples = Vec::with_capacity(count);
        while samples.len() < count {
            let len = rng.gen_range(1..6);
            let words: Vec<&str> = (0..len)
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect();
            let text = words.join(" ");
            let label = rng.gen_range(0..classes);
            if seen.insert(text.clone()) {
                samples.push(LabeledSentence {
                    label,
                    sentence: TokenizedSentence::from_raw(&text),
                });
            }
        }
        Split {
            samples,
            malformed: 0,
        }
    }

    fn synthetic(train: usize, test: usize) -> Dataset {
        Dataset {
            spec: DatasetSpec {
                name: "synthetic".into(),
                train_path: "train.csv".into(),
                test_path: "test.csv".into(),
                classes: 2,
                n: 5,
                m: 6,
                format: CsvFormat::Csv2,
            },
            train: synthetic_split(train, 2, 1),
            test: synthetic_split(test, 2, 2),
        }
    }

    fn small_config(epochs: usize) -> ExperimentConfig {
        let model = ModelConfig {
            n: 5,
            m: 6,
            classes: 2,
            initial_filters: 8,
            growth: 4,
            layers_per_block: 2,
            fc_hidden: 32,
            ..ModelConfig::default()
        };
        ExperimentConfig {
            data: DataSource::Dir("synthetic".into()),
            model,
            train: TrainConfig {
                epochs,
                micro_batch: 8,
                validation_fraction: 0.0,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn memorizes_thirty_two_samples() {
        let data = synthetic(32, 8);
        let outcome = train(&small_config(200), &data, None).unwrap();
        assert_eq!(
            outcome.report.final_train_accuracy(),
            1.0,
            "{}",
            outcome.report.render()
        );
        assert!(
            outcome.report.epochs.last().unwrap().train_loss < outcome.report.epochs[0].train_loss
        );
    }

    #[test]
    fn identical_seeds_give_identical_artifacts() {
        let data = synthetic(40, 10);
        let mut config = small_config(2);
        config.train.validation_fraction = 0.1;
        config.train.batch_size = 16;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train(&config, &data, Some(a.path())).unwrap();
        let rb = train(&config, &data, Some(b.path())).unwrap();
        assert_eq!(ra.report.render(), rb.report.render());
        let (da, db) = (ra.run_dir.unwrap(), rb.run_dir.unwrap());
        for name in [checkpoint_name(1), checkpoint_name(2)] {
            let fa = fs::read(da.join(CHECKPOINT_DIR).join(&name)).unwrap();
            let fb = fs::read(db.join(CHECKPOINT_DIR).join(&name)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            fs::read_to_string(da.join(REPORT_FILE)).unwrap(),
            ra.report.render()
        );
        assert!(da.join(TIMING_FILE).is_file());
        let log = fs::read_to_string(da.join(PREDICTIONS_FILE)).unwrap();
        let recount = metrics_from_log(&log).unwrap();
        assert_eq!(Some(recount.accuracy), ra.report.test_accuracy);

        config.set_seed(1);
        let rc = train(&config, &data, None).unwrap();
        assert_ne!(rc.report.render(), ra.report.render());
    }

    #[test]
    fn break_stops_after_the_checkpoint() {
        let data = synthetic(16, 4);
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let outcome = train_with_progress(&small_config(5), &data, Some(dir.path()), &mut |e| {
            seen += 1;
            if e.epoch == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!((seen, outcome.report.epochs.len()), (2, 2));
        let run = outcome.run_dir.unwrap();
        assert!(run.join(CHECKPOINT_DIR).join(checkpoint_name(2)).is_file());
        assert!(!run.join(CHECKPOINT_DIR).join(checkpoint_name(3)).exists());
        assert!(outcome.report.test_accuracy.is_some());
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let data = synthetic(8, 2);
        assert!(train(&small_config(0), &data, None).is_err());
        let mut config = small_config(1);
        config.train.subsample = Some(9);
        assert!(train(&config, &data, None).is_err());
    }

    #[test]
    fn subsamples_are_prefixes_of_one_permutation() {
        let mut config = small_config(1);
        config.train.validation_fraction = 0.25;
        let (train_all, val_all) = split_indices(&config, 100).unwrap();
        let mut all: Vec<usize> = val_all.iter().chain(&train_all).copied().collect();
        assert_eq!(val_all.len(), 25);
        config.train.subsample = Some(40);
        let (train_sub, val_sub) = split_indices(&config, 100).unwrap();
        let sub: Vec<usize> = val_sub.iter().chain(&train_sub).copied().collect();
        assert_eq!(sub, all[..40]);
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_shuffles_are_permutations() {
        let mut rng = stream(3, SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..50).collect();
        for _ in 0..5 {
            order.shuffle(&mut rng);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn accuracy_examples() {
        let perfect = Metrics::from_pairs([(0, 0), (3, 3), (1, 1)]).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert!(Metrics::from_pairs(std::iter::empty()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let constant = Metrics::from_pairs((0..7600).map(|_| (rng.gen_range(0..4), 0))).unwrap();
        assert!(
            (constant.accuracy - 0.25).abs() < 0.02,
            "{}",
            constant.accuracy
        );
        let model = Model::build(small_config(1).model, None).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn padding_table_lists_every_strategy() {
        let data = synthetic(24, 12);
        let config = small_config(1);
        let mut runs = 0;
        let table =
            compare_paddings(&config, &data, &[1, 2], None, &mut |_, _, _| runs += 1).unwrap();
        assert_eq!(runs, 6);
        let text = table.render();
        for label in [
            "Zero Padding",
            "Cyclic Padding",
            "Serpentine Padding",
            "seed 2",
        ] {
            assert!(text.contains(label), "{text}");
        }
        assert!(compare_paddings(&config, &data, &[], None, &mut |_, _, _| {}).is_err());
    }

    #[test]
    fn baselines_train_end_to_end() {
        let data = synthetic(24, 6);
        for arch in [Arch::WordCnn, Arch::CharCnn] {
            let mut config = small_config(2);
            config.model = ModelConfig {
                arch,
                n: 14,
                m: 8,
                classes: 2,
                initial_filters: 4,
                fc_hidden: 8,
                embed_dim: 6,
                ..ModelConfig::new(arch)
            };
            let outcome = train(&config, &data, None).unwrap();
            assert!(outcome
                .report
                .epochs
                .iter()
                .all(|e| e.train_loss.is_finite()));
        }
    }
}
