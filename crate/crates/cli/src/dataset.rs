//! Dataset loaders: seeded Gaussian blobs, CSV files and the CIFAR-10 binary
//! distribution.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use addlc_core::model::{Dataset, FeatureStats, LossKind, Targets};

use crate::config::DataSource;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Corrupt(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] addlc_core::Error),
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn num_outputs(&self) -> usize {
        match self.train.targets() {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Values { dim, .. } => *dim,
        }
    }
}

pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(source: &DataSource, loss: LossKind, seed: u64) -> Result<Splits, DataError> {
    let splits = match source {
        DataSource::SyntheticBlobs {
            classes,
            dim,
            n,
            test_n,
            separation,
            seed: data_seed,
        } => {
            let (train, test) = synthetic_blobs(
                *classes,
                *dim,
                *n,
                test_n.unwrap_or(*n),
                *separation,
                data_seed.unwrap_or(seed),
            )?;
            Splits { train, test }
        }
        DataSource::Csv {
            path,
            test_path,
            has_header,
            standardize,
        } => {
            let train = read_csv(path, *has_header, loss)?;
            let test = match test_path {
                Some(p) => read_csv(p, *has_header, loss)?,
                None => train.clone(),
            };
            let (mut train, mut test) = align_classes(train, test)?;
            if *standardize {
                let stats = FeatureStats::fit(&train);
                stats.apply(&mut train);
                stats.apply(&mut test);
            }
            Splits { train, test }
        }
        DataSource::Cifar10Binary { dir, limit } => load_cifar10(dir, *limit)?,
    };
    if splits.train.dim() != splits.test.dim() {
        return Err(DataError::Corrupt(format!(
            "train has {} features, test has {}",
            splits.train.dim(),
            splits.test.dim()
        )));
    }
    if loss == LossKind::SquaredError && matches!(splits.train.targets(), Targets::Classes { .. }) {
        return Err(DataError::Corrupt(
            "squared error needs real-valued targets".into(),
        ));
    }
    Ok(splits)
}

/// Balanced Gaussian class blobs: class `c` owns example `i` when
/// `i mod classes == c`; centres are drawn from N(0, separation²) per
/// coordinate and points add unit Gaussian noise.
pub fn synthetic_blobs(
    classes: usize,
    dim: usize,
    n: usize,
    test_n: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = Normal::new(0.0, separation).map_err(|e| DataError::Corrupt(e.to_string()))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<f64> = (0..classes * dim)
        .map(|_| centre.sample(&mut rng))
        .collect();
    let mut draw = |count: usize| -> Result<Dataset, DataError> {
        let mut inputs = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % classes;
            inputs.extend(
                centres[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|m| m + noise.sample(&mut rng)),
            );
            labels.push(c);
        }
        Ok(Dataset::new(
            dim,
            inputs,
            Targets::Classes {
                labels,
                num_classes: classes,
            },
        )?)
    };
    let train = draw(n)?;
    let test = draw(test_n)?;
    Ok((train, test))
}

/// Numeric CSV whose last column is the label (an integer class for
/// cross-entropy, a real value for squared error).
pub fn read_csv(path: &Path, has_header: bool, loss: LossKind) -> Result<Dataset, DataError> {
    let bytes = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(DataError::Corrupt(format!(
                "{} row {row}: need features and a label",
                path.display()
            )));
        }
        let d = record.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(DataError::Corrupt(format!(
                "{} row {row}: expected {} features",
                path.display(),
                dim.unwrap()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| {
                DataError::Corrupt(format!("{} row {row}: not a number: {s:?}", path.display()))
            })
        };
        for field in record.iter().take(d) {
            inputs.push(parse(field)?);
        }
        let label = &record[d];
        match loss {
            LossKind::CrossEntropy => labels.push(label.parse::<usize>().map_err(|_| {
                DataError::Corrupt(format!(
                    "{} row {row}: label {label:?} is not a class index",
                    path.display()
                ))
            })?),
            LossKind::SquaredError => values.push(parse(label)?),
        }
    }
    let dim = dim.ok_or_else(|| DataError::Corrupt(format!("{} has no rows", path.display())))?;
    let targets = match loss {
        LossKind::CrossEntropy => Targets::Classes {
            num_classes: labels.iter().max().map_or(0, |m| m + 1),
            labels,
        },
        LossKind::SquaredError => Targets::Values { values, dim: 1 },
    };
    Ok(Dataset::new(dim, inputs, targets)?)
}

/// Gives train and test the same number of classes.
fn align_classes(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset), DataError> {
    let (Targets::Classes { num_classes: a, .. }, Targets::Classes { num_classes: b, .. }) =
        (train.targets(), test.targets())
    else {
        return Ok((train, test));
    };
    let k = (*a).max(*b).max(2);
    let relabel = |d: Dataset| -> Result<Dataset, DataError> {
        let Targets::Classes { labels, .. } = d.targets().clone() else {
            unreachable!()
        };
        Ok(Dataset::new(
            d.dim(),
            d.inputs().to_vec(),
            Targets::Classes {
                labels,
                num_classes: k,
            },
        )?)
    };
    Ok((relabel(train)?, relabel(test)?))
}

/// Splits CIFAR-10 binary records (one label byte, 3072 pixel bytes) into
/// pixels scaled to [0, 1] and labels.
pub fn parse_cifar_records(bytes: &[u8], what: &str) -> Result<(Vec<f64>, Vec<usize>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::Corrupt(format!(
            "{what}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DataError::Corrupt(format!(
                "{what}: record {i} has label {}",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Five training batches and the test batch, standardized with per-pixel
/// training means and deviations.
pub fn load_cifar10(dir: &Path, limit: Option<usize>) -> Result<Splits, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let (p, l) = parse_cifar_records(&read(&dir.join(name))?, name)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if let Some(limit) = limit {
        labels.truncate(limit);
        pixels.truncate(limit * 3072);
    }
    let (test_pixels, test_labels) =
        parse_cifar_records(&read(&dir.join(CIFAR_TEST_FILE))?, CIFAR_TEST_FILE)?;
    let classes = |labels| Targets::Classes {
        labels,
        num_classes: 10,
    };
    let mut train = Dataset::new(3072, pixels, classes(labels))?;
    let mut test = Dataset::new(3072, test_pixels, classes(test_labels))?;
    let stats = FeatureStats::fit(&train);
    stats.apply(&mut train);
    stats.apply(&mut test);
    Ok(Splits { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_shaped_and_balanced() {
        let (train, test) = synthetic_blobs(2, 4, 200, 50, 2.0, 7).unwrap();
        assert_eq!((train.len(), train.dim()), (200, 4));
        assert_eq!(test.len(), 50);
        let Targets::Classes { labels, .. } = train.targets() else {
            panic!()
        };
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 100);
        let (again, _) = synthetic_blobs(2, 4, 200, 50, 2.0, 7).unwrap();
        assert_eq!(train.inputs(), again.inputs());
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let (pixels, labels) = parse_cifar_records(&bytes, "t").unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(pixels.len(), 2 * 3072);
        assert_eq!(pixels[0], 1.0);
        assert!(parse_cifar_records(&bytes[..100], "t").is_err());
        bytes[0] = 10;
        assert!(parse_cifar_records(&bytes, "t").is_err());
    }
}
