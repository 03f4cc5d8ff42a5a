use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sent2matrix::embedding::{sentence_tensor, write_batch};
use sent2matrix::harness::data::prepare_mr;
use sent2matrix::harness::train::{checkpoint_name, CHECKPOINT_DIR, CONFIG_FILE, VOCAB_FILE};
use sent2matrix::harness::{
    compare_paddings, evaluate, load_dataset, train_with_progress, DataSource, ExperimentConfig,
};
use sent2matrix::models::{Arch, Model};
use sent2matrix::nn::checkpoint::load_checkpoint;
use sent2matrix::nn::layer_family_checks;
use sent2matrix::padding::{fold_render, layout_render, PaddingStrategy};
use sent2matrix::text::{TokenizedSentence, WordVocab};
use sent2matrix::Error;

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "s2m",
    version,
    about = "Sent2Matrix sentence tensors and classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode sentences as Sent2Matrix tensors and write a binary batch.
    Encode(EncodeArgs),
    /// Train a classifier; writes checkpoints, a report and a prediction log.
    Train(ExperimentArgs),
    /// Score a trained run on the test split.
    Eval(EvalArgs),
    /// Train under zero, cyclic and serpentine padding and tabulate accuracy.
    ComparePaddings(CompareArgs),
    /// Finite-difference gradient checks of every layer family.
    Gradcheck(GradcheckArgs),
    /// Print the serpentine fold (or a word padding layout) of a sentence.
    FoldVisualize(FoldArgs),
    /// Split the raw movie-review polarity files into train/test CSVs.
    PrepareMr(PrepareMrArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Sentence to encode; repeat for a batch.
    #[arg(long, required = true)]
    text: Vec<String>,
    #[arg(long, default_value = "serpentine")]
    strategy: PaddingStrategy,
    #[arg(long, default_value_t = 18)]
    m: usize,
    /// Sentence capacity in words; defaults to the longest sentence.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value = "off")]
    position: Switch,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment file with [data], [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled dataset name (ag_news, yelp_full, mr) or a directory with
    /// train.csv and test.csv.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    strategy: Option<PaddingStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    position: Option<Switch>,
    /// Base directory for run artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Run directory to score; derived from the experiment when omitted.
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 18)]
    m: usize,
    #[arg(long, default_value = "serpentine")]
    strategy: PaddingStrategy,
}

#[derive(Args)]
struct PrepareMrArgs {
    /// One negative review sentence per line.
    #[arg(long)]
    neg: PathBuf,
    /// One positive review sentence per line.
    #[arg(long)]
    pos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure together with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("s2m: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ComparePaddings(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::FoldVisualize(a) => fold(a),
        Command::PrepareMr(a) => {
            let (train, test) = prepare_mr(&a.neg, &a.pos, &a.out, a.seed)?;
            println!(
                "wrote {train} training and {test} test sentences to {}",
                a.out.display()
            );
            Ok(())
        }
    }
}

fn encode(a: EncodeArgs) -> Result<(), Failure> {
    let sentences: Vec<TokenizedSentence> = a
        .text
        .iter()
        .map(|t| TokenizedSentence::from_raw(t))
        .collect();
    let n = a.n.unwrap_or_else(|| {
        sentences
            .iter()
            .map(TokenizedSentence::len)
            .max()
            .unwrap_or(1)
            .max(1)
    });
    let tensors = sentences
        .iter()
        .map(|s| sentence_tensor(s, n, a.m, a.strategy, a.position.into()))
        .collect::<sent2matrix::Result<Vec<_>>>()?;
    let file = File::create(&a.out).map_err(|e| io_failure(&a.out, e))?;
    write_batch(BufWriter::new(file), &tensors).map_err(|e| io_failure(&a.out, e))?;
    let (slices, m, c) = tensors[0].shape();
    println!(
        "wrote {} tensor(s) of {slices}x{m}x{c} to {}",
        tensors.len(),
        a.out.display()
    );
    Ok(())
}

/// Experiment from `--config` or `--dataset`, then flag overrides.
fn experiment(a: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = match (&a.config, &a.dataset) {
        (Some(path), None) => {
            ExperimentConfig::load(path).map_err(|e| Failure::usage(e.to_string()))?
        }
        (None, Some(name)) => dataset_config(name)?,
        (Some(_), Some(_)) => {
            return Err(Failure::usage(
                "give either --config or --dataset, not both",
            ))
        }
        (None, None) => return Err(Failure::usage("one of --config or --dataset is required")),
    };
    if let Some(s) = a.strategy {
        config.model.strategy = s;
    }
    if let Some(p) = a.position {
        config.model.use_position = p.into();
    }
    if let Some(seed) = a.seed {
        config.set_seed(seed);
    }
    if let Some(k) = a.subsample {
        config.train.subsample = Some(k);
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    config.model.validate()?;
    config.train.validate()?;
    Ok(config)
}

fn dataset_config(name: &str) -> Result<ExperimentConfig, Failure> {
    let builtin = ExperimentConfig::for_builtin(name, Arch::Sent2MatrixDense);
    if builtin.is_ok() || !Path::new(name).is_dir() {
        return Ok(builtin?);
    }
    let mut config = ExperimentConfig::for_builtin("mr", Arch::Sent2MatrixDense)?;
    config.data = DataSource::Dir(PathBuf::from(name));
    Ok(config)
}

fn train(a: ExperimentArgs) -> Result<(), Failure> {
    let config = experiment(&a)?;
    let data = load_dataset(&config.dataset_spec()?)?;
    report_malformed(&data);
    let outcome = train_with_progress(&config, &data, Some(&a.out), &mut |e| {
        let val = e
            .validation_accuracy
            .map_or_else(|| "-".to_owned(), |v| format!("{:.4}", v));
        println!(
            "epoch {:>3}  loss {:.6}  train {:.4}  validation {val}",
            e.epoch, e.train_loss, e.train_accuracy
        );
        ControlFlow::Continue(())
    })?;
    if let Some(acc) = outcome.report.test_accuracy {
        println!("test accuracy {acc:.4}");
    }
    if let Some(dir) = outcome.run_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn report_malformed(data: &sent2matrix::harness::Dataset) {
    for (name, split) in [("train", &data.train), ("test", &data.test)] {
        if split.malformed > 0 {
            eprintln!(
                "s2m: skipped {} malformed {name} record(s)",
                split.malformed
            );
        }
    }
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let run_dir = match &a.run {
        Some(dir) => dir.clone(),
        None => a.experiment.out.join(experiment(&a.experiment)?.run_name()),
    };
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))
        .map_err(|e| Failure::usage(e.to_string()))?;
    let vocab = match config.model.arch {
        Arch::WordCnn => {
            let path = run_dir.join(VOCAB_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
            Some(WordVocab::parse_dump(&text, config.model.vocab_size)?)
        }
        _ => None,
    };
    let mut model = Model::build(config.model.clone(), vocab)?;
    let ckpt_path = run_dir
        .join(CHECKPOINT_DIR)
        .join(checkpoint_name(config.train.epochs));
    let ckpt = load_checkpoint(&ckpt_path)?;
    if ckpt.digest != config.digest() {
        return Err(Failure::usage(format!(
            "{} belongs to a different configuration",
            ckpt_path.display()
        )));
    }
    ckpt.load_into(&mut model.params)?;
    let data = load_dataset(&config.dataset_spec()?)?;
    report_malformed(&data);
    let ev = evaluate(&model, &data.test.samples)?;
    let log = run_dir.join("predictions-eval.csv");
    std::fs::write(&log, ev.log_csv()).map_err(|e| io_failure(&log, e))?;
    println!(
        "accuracy {} ({}/{})",
        ev.metrics.accuracy, ev.metrics.correct, ev.metrics.total
    );
    println!("prediction log {}", log.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    let config = experiment(&a.experiment)?;
    let data = load_dataset(&config.dataset_spec()?)?;
    report_malformed(&data);
    let table = compare_paddings(
        &config,
        &data,
        &a.seeds,
        Some(&a.experiment.out),
        &mut |s, seed, r| {
            println!(
                "{s:<10} seed {seed}: test accuracy {:.4}",
                r.test_accuracy.unwrap_or(f64::NAN)
            );
        },
    )?;
    print!("{}", table.render());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let checks = layer_family_checks(a.seed)?;
    let mut worst: f64 = 0.0;
    for (name, report) in &checks {
        println!(
            "{name:<30} max relative error {:.3e} over {} entries",
            report.max_rel_error, report.checked
        );
        worst = worst.max(report.max_rel_error);
    }
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::numerical(format!(
            "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn fold(a: FoldArgs) -> Result<(), Failure> {
    if a.m == 0 {
        return Err(Failure::usage("--m must be at least 1"));
    }
    let sentence = TokenizedSentence::from_raw(&a.text);
    let grid = match a.strategy {
        PaddingStrategy::Serpentine => fold_render(&sentence.words, a.m),
        other => layout_render(&sentence.words, a.m, other.word_padding()),
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{grid}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}
