//! Labeled CSV corpora.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::TokenizedSentence;

/// Environment variable naming the directory that holds the corpora.
pub const DATA_DIR_ENV: &str = "S2M_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data";

/// Held-out size of the movie-review split.
pub const MR_TEST_SIZE: usize = 427;
/// Sentences in the movie-review corpus.
pub const MR_TOTAL: usize = 10_662;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvFormat {
    /// `label,text`
    Csv2,
    /// `label,title,description`
    Csv3,
}

impl CsvFormat {
    pub fn fields(self) -> usize {
        match self {
            CsvFormat::Csv2 => 2,
            CsvFormat::Csv3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub classes: usize,
    pub n: usize,
    pub m: usize,
    pub format: CsvFormat,
}

/// `(name, directory, classes, n, m, format)` of the bundled recipes.
const BUILTIN: [(&str, &str, usize, usize, usize, CsvFormat); 3] = [
    ("ag_news", "ag_news", 4, 49, 18, CsvFormat::Csv3),
    ("yelp_full", "yelp_full", 5, 67, 18, CsvFormat::Csv2),
    ("mr", "mr", 2, 51, 18, CsvFormat::Csv2),
];

impl DatasetSpec {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|b| b.0)
    }

    /// A bundled corpus under `data_dir/<name>/{train,test}.csv`.
    pub fn builtin(name: &str, data_dir: &Path) -> Option<Self> {
        let &(name, dir, classes, n, m, format) = BUILTIN.iter().find(|b| b.0 == name)?;
        Some(DatasetSpec {
            name: name.to_owned(),
            train_path: data_dir.join(dir).join("train.csv"),
            test_path: data_dir.join(dir).join("test.csv"),
            classes,
            n,
            m,
            format,
        })
    }

    /// A directory with `train.csv` and `test.csv` in either format; the
    /// format is read off the first train record.
    pub fn from_dir(dir: &Path, classes: usize, n: usize, m: usize) -> Result<Self> {
        let train_path = dir.join("train.csv");
        let mut reader = csv_reader(open(&train_path)?);
        let first = reader
            .byte_records()
            .next()
            .ok_or_else(|| Error::data(format!("{} is empty", train_path.display())))?
            .map_err(|e| Error::data(format!("{}: {e}", train_path.display())))?;
        let format = match first.len() {
            2 => CsvFormat::Csv2,
            3 => CsvFormat::Csv3,
            k => {
                return Err(Error::data(format!(
                    "{}: records have {k} fields",
                    train_path.display()
                )))
            }
        };
        Ok(DatasetSpec {
            name: dir
                .file_name()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
            test_path: dir.join("test.csv"),
            train_path,
            classes,
            n,
            m,
            format,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.classes < 2 {
            return Err(Error::config(format!(
                "dataset `{}` needs n, m > 0 and at least 2 classes",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence {
    pub label: usize,
    pub sentence: TokenizedSentence,
}

/// One parsed file. `malformed` counts records that could not be read.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub samples: Vec<LabeledSentence>,
    pub malformed: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input)
}

/// Parse `label,text...` records. Labels are 1-based in the file and
/// 0-based in the result; text fields are joined by a space and escaped
/// newlines count as spaces.
pub fn parse_split<R: Read>(
    input: R,
    format: CsvFormat,
    classes: usize,
    origin: &str,
) -> Result<Split> {
    let mut split = Split::default();
    for (row, record) in csv_reader(input).byte_records().enumerate() {
        let Ok(record) = record else {
            split.malformed += 1;
            continue;
        };
        if record.len() != format.fields() {
            split.malformed += 1;
            continue;
        }
        let label_text = String::from_utf8_lossy(&record[0]);
        let Ok(label) = label_text.trim().parse::<usize>() else {
            split.malformed += 1;
            continue;
        };
        if label == 0 || label > classes {
            return Err(Error::data(format!(
                "{origin} record {}: label {label} outside 1..={classes}",
                row + 1
            )));
        }
        let text = record
            .iter()
            .skip(1)
            .map(String::from_utf8_lossy)
            .collect::<Vec<_>>()
            .join(" ")
            .replace("\\n", " ");
        split.samples.push(LabeledSentence {
            label: label - 1,
            sentence: TokenizedSentence::from_raw(&text)
                .with_source(format!("{origin}:{}", row + 1)),
        });
    }
    Ok(split)
}

pub fn load_split(path: &Path, format: CsvFormat, classes: usize) -> Result<Split> {
    parse_split(open(path)?, format, classes, &path.display().to_string())
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    for path in [&spec.train_path, &spec.test_path] {
        if !path.is_file() {
            return Err(Error::data(format!(
                "dataset `{}` not found: {} is missing (set {DATA_DIR_ENV} or pass a dataset directory)",
                spec.name,
                path.display()
            )));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        train: load_split(&spec.train_path, spec.format, spec.classes)?,
        test: load_split(&spec.test_path, spec.format, spec.classes)?,
    })
}

/// `S2M_DATA_DIR` if set, `data` otherwise.
pub fn data_dir_from_env() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from)
}

/// Seeded test indices of a `total`-sentence corpus: the first `test_size`
/// entries of a shuffled `0..total`, sorted.
pub fn seeded_test_indices(total: usize, test_size: usize, seed: u64) -> Result<Vec<usize>> {
    if test_size == 0 || test_size >= total {
        return Err(Error::invalid(format!(
            "cannot hold out {test_size} of {total} sentences"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order[..test_size].to_vec();
    test.sort_unstable();
    Ok(test)
}

/// Index list shipped for the movie-review corpus (seed 0): one index per
/// line into the negative sentences followed by the positive ones.
pub const MR_TEST_INDICES: &str = include_str!("../../data/mr_test_indices.txt");

pub fn parse_index_list(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::data(format!("bad index `{l}`")))
        })
        .collect()
}

/// Read a one-sentence-per-line file; bytes outside UTF-8 are replaced.
fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

/// Split the raw movie-review polarity files into `train.csv`/`test.csv`
/// (label 1 negative, 2 positive) under `out_dir`, writing the test index
/// list next to them. Returns the train and test sizes.
pub fn prepare_mr(neg: &Path, pos: &Path, out_dir: &Path, seed: u64) -> Result<(usize, usize)> {
    let negatives = read_lines(neg)?;
    let positives = read_lines(pos)?;
    let all: Vec<(usize, &str)> = negatives
        .iter()
        .map(|s| (1, s.as_str()))
        .chain(positives.iter().map(|s| (2, s.as_str())))
        .collect();
    let test = if seed == 0 && all.len() == MR_TOTAL {
        parse_index_list(MR_TEST_INDICES)?
    } else {
        seeded_test_indices(all.len(), MR_TEST_SIZE, seed)?
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, rows: &mut dyn Iterator<Item = &(usize, &str)>| -> Result<usize> {
        let path = out_dir.join(name);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut count = 0;
        for (label, text) in rows {
            w.write_record([label.to_string().as_str(), text])
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            count += 1;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(count)
    };
    let mut is_test = vec![false; all.len()];
    for &i in &test {
        is_test[i] = true;
    }
    let train_n = write(
        "train.csv",
        &mut all
            .iter()
            .zip(&is_test)
            .filter(|(_, t)| !**t)
            .map(|(r, _)| r),
    )?;
    let test_n = write("test.csv", &mut test.iter().map(|&i| &all[i]))?;
    let list: String = test.iter().map(|i| format!("{i}\n")).collect();
    let path = out_dir.join("test_indices.txt");
    std::fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
    Ok((train_n, test_n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ag_style_record() {
        let split = parse_split(
            &b"\"3\",\"Title\",\"Some desc.\"\n"[..],
            CsvFormat::Csv3,
            4,
            "t",
        )
        .unwrap();
        assert_eq!(split.samples.len(), 1);
        assert_eq!(split.samples[0].label, 2);
        assert_eq!(split.samples[0].sentence.words, ["title", "some", "desc"]);
        assert_eq!(split.samples[0].sentence.source_id.as_deref(), Some("t:1"));
    }

    #[test]
    fn empty_text_is_kept() {
        let split = parse_split(&b"1,\"\"\n2,\"!!\"\n"[..], CsvFormat::Csv2, 2, "t").unwrap();
        assert_eq!(split.len(), 2);
        assert!(split.samples.iter().all(|s| s.sentence.is_empty()));
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        assert!(parse_split(&b"9,\"a\",\"b\"\n"[..], CsvFormat::Csv3, 4, "t").is_err());
        assert!(parse_split(&b"0,\"a\"\n"[..], CsvFormat::Csv2, 2, "t").is_err());
    }

    #[test]
    fn malformed_rows_are_counted() {
        let text = b"1,\"ok\"\nx,\"bad label\"\n2,\"too\",\"many\"\n2,\"fine\\nline\"\n";
        let split = parse_split(&text[..], CsvFormat::Csv2, 2, "t").unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.malformed, 2);
        assert_eq!(split.samples[1].sentence.words, ["fine", "line"]);
    }

    #[test]
    fn builtin_specs() {
        let ag = DatasetSpec::builtin("ag_news", Path::new("/d")).unwrap();
        assert_eq!(
            (ag.classes, ag.n, ag.m, ag.format),
            (4, 49, 18, CsvFormat::Csv3)
        );
        assert_eq!(ag.train_path, Path::new("/d/ag_news/train.csv"));
        let yelp = DatasetSpec::builtin("yelp_full", Path::new("/d")).unwrap();
        assert_eq!((yelp.classes, yelp.n), (5, 67));
        let mr = DatasetSpec::builtin("mr", Path::new("/d")).unwrap();
        assert_eq!((mr.classes, mr.n), (2, 51));
        assert!(DatasetSpec::builtin("imdb", Path::new("/d")).is_none());
    }

    #[test]
    fn missing_files_are_data_errors() {
        let spec = DatasetSpec::builtin("mr", Path::new("/nonexistent")).unwrap();
        assert!(matches!(load_dataset(&spec), Err(Error::Data(_))));
    }

    #[test]
    fn shipped_mr_split_matches_its_seed() {
        let shipped = parse_index_list(MR_TEST_INDICES).unwrap();
        assert_eq!(shipped.len(), MR_TEST_SIZE);
        assert_eq!(
            shipped,
            seeded_test_indices(MR_TOTAL, MR_TEST_SIZE, 0).unwrap()
        );
        assert_eq!(MR_TOTAL - MR_TEST_SIZE, 10_235);
    }

    #[test]
    fn prepare_mr_writes_a_seeded_split() {
        let dir = tempfile::tempdir().unwrap();
        let neg: String = (0..300)
            .map(|i| format!("bad movie number {i}\n"))
            .collect();
        let pos: String = (0..300)
            .map(|i| format!("good film \u{e9}dition {i}\n"))
            .collect();
        std::fs::write(dir.path().join("neg"), neg).unwrap();
        std::fs::write(dir.path().join("pos"), pos).unwrap();
        let out = dir.path().join("mr");
        let (train, test) =
            prepare_mr(&dir.path().join("neg"), &dir.path().join("pos"), &out, 3).unwrap();
        assert_eq!((train, test), (600 - MR_TEST_SIZE, MR_TEST_SIZE));
        let spec = DatasetSpec::builtin("mr", dir.path()).unwrap();
        let data = load_dataset(&spec).unwrap();
        assert_eq!(data.train.len() + data.test.len(), 600);
        assert_eq!(data.train.malformed + data.test.malformed, 0);
        let from_dir = DatasetSpec::from_dir(&out, 2, 51, 18).unwrap();
        assert_eq!(from_dir.format, CsvFormat::Csv2);
    }
}
