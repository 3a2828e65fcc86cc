//! Datasets: CSV ingestion, synthetic Gaussian mixtures, the labeled/unlabeled
//! split and deterministic mini-batching.
//!
//! CSV files are UTF-8, comma-delimited, with a header row. Feature columns
//! are `f0..fk` and the class column is `label`; unlabeled files omit `label`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub features: Vec<f64>,
}

impl From<&LabeledExample> for UnlabeledExample {
    fn from(ex: &LabeledExample) -> Self {
        Self {
            features: ex.features.clone(),
        }
    }
}

/// Disjoint partitions of one labeled source. The unlabeled partition keeps
/// only features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitDataset {
    pub labeled_train: Vec<LabeledExample>,
    pub unlabeled_train: Vec<UnlabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Source row indices behind each partition of a [`SplitDataset`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub labeled_train: Vec<usize>,
    pub unlabeled_train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// splitmix64 finalizer over `seed ⊕ stream`; used to key sub-streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureColumns {
    /// Every header column named `<prefix><n>`, ordered by `n`.
    Prefixed(String),
    Named(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub features: FeatureColumns,
    pub label: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            features: FeatureColumns::Prefixed("f".into()),
            label: "label".into(),
        }
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::MalformedRow {
            row: 0,
            message: e.to_string(),
        })
}

fn feature_indices(headers: &csv::StringRecord, schema: &FeatureColumns) -> Result<Vec<usize>> {
    match schema {
        FeatureColumns::Prefixed(prefix) => {
            let mut cols: Vec<(usize, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(i, h)| {
                    h.strip_prefix(prefix.as_str())
                        .and_then(|n| n.parse::<usize>().ok())
                        .map(|n| (n, i))
                })
                .collect();
            cols.sort_unstable();
            if cols.is_empty() {
                return Err(Error::UnknownColumn {
                    column: format!("{prefix}0"),
                });
            }
            if let Some((k, _)) = cols.iter().enumerate().find(|(k, (n, _))| k != n) {
                return Err(Error::UnknownColumn {
                    column: format!("{prefix}{k}"),
                });
            }
            Ok(cols.into_iter().map(|(_, i)| i).collect())
        }
        FeatureColumns::Named(names) => names
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::UnknownColumn {
                        column: name.clone(),
                    })
            })
            .collect(),
    }
}

fn parse_features(record: &csv::StringRecord, cols: &[usize], row: usize) -> Result<Vec<f64>> {
    cols.iter()
        .map(|&c| {
            let raw = record.get(c).ok_or_else(|| Error::MalformedRow {
                row,
                message: format!("missing field {c}"),
            })?;
            let v: f64 = raw.trim().parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("non-numeric feature `{raw}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("non-finite feature `{raw}`"),
                });
            }
            Ok(v)
        })
        .collect()
}

/// Reads labeled rows in file order. Row numbers in errors count data rows from 1.
///
/// If every label parses as a non-negative integer it is used as the class
/// index; otherwise labels are treated as class names and numbered by first
/// appearance.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let cols = feature_indices(&headers, &schema.features)?;
    let label_col = headers
        .iter()
        .position(|h| h == schema.label)
        .ok_or_else(|| Error::UnknownColumn {
            column: schema.label.clone(),
        })?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::MalformedRow {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let features = parse_features(&record, &cols, row)?;
        let label = record.get(label_col).unwrap_or_default().trim().to_string();
        if label.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty label".into(),
            });
        }
        rows.push((features, label));
    }

    let numeric: Option<Vec<usize>> = rows.iter().map(|(_, l)| l.parse().ok()).collect();
    let labels = match numeric {
        Some(ids) => ids,
        None => {
            let mut names: HashMap<&str, usize> = HashMap::new();
            rows.iter()
                .map(|(_, l)| {
                    let next = names.len();
                    *names.entry(l.as_str()).or_insert(next)
                })
                .collect()
        }
    };
    Ok(rows
        .into_iter()
        .zip(labels)
        .map(|((features, _), label)| LabeledExample { features, label })
        .collect())
}

/// Reads feature-only rows; a `label` column, if present, is ignored.
pub fn load_unlabeled_csv(
    path: impl AsRef<Path>,
    features: &FeatureColumns,
) -> Result<Vec<UnlabeledExample>> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let cols = feature_indices(&headers, features)?;
    reader
        .records()
        .enumerate()
        .map(|(i, record)| {
            let row = i + 1;
            let record = record.map_err(|e| Error::MalformedRow {
                row,
                message: e.to_string(),
            })?;
            Ok(UnlabeledExample {
                features: parse_features(&record, &cols, row)?,
            })
        })
        .collect()
}

fn feature_header(dim: usize) -> Vec<String> {
    (0..dim).map(|k| format!("f{k}")).collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| {
        Error::io(
            format!("cannot write {}", path.display()),
            std::io::Error::other(e),
        )
    })
}

fn write_err(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> Error {
    Error::io(format!("cannot write {}", path.display()), std::io::Error::other(e))
}

pub fn write_labeled_csv(path: impl AsRef<Path>, rows: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv_writer(path)?;
    let mut header = feature_header(dim);
    header.push("label".into());
    w.write_record(&header).map_err(|e| write_err(path, e))?;
    for r in rows {
        let mut rec: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        rec.push(r.label.to_string());
        w.write_record(&rec).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("cannot write {}", path.display()), e))
}

pub fn write_unlabeled_csv(path: impl AsRef<Path>, rows: &[UnlabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv_writer(path)?;
    w.write_record(feature_header(dim)).map_err(|e| write_err(path, e))?;
    for r in rows {
        let rec: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        w.write_record(&rec).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("cannot write {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class means spaced evenly on a circle of `radius` in the first two
/// feature dimensions (remaining dimensions zero).
pub fn circle_means(num_classes: usize, input_dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let angle = std::f64::consts::FRAC_PI_2
                + 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            let mut m = vec![0.0; input_dim];
            if input_dim == 1 {
                m[0] = radius * (c as f64 - (num_classes as f64 - 1.0) / 2.0);
            } else {
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

/// `per_class` isotropic draws `N(mean_c, cov_scale · I)` for each class, class by class.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    means: &[Vec<f64>],
    cov_scale: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if means.len() != num_classes {
        return Err(Error::InvalidDataset(format!(
            "{} means for {num_classes} classes",
            means.len()
        )));
    }
    generate_multimodal_mixture(num_classes, per_class, means, cov_scale, seed)
}

/// Like [`generate_gaussian_mixture`] with several components per class:
/// component `k` belongs to class `k mod C`, and the `j`-th draw of class `c`
/// comes from component `c + C·(j mod m)` where `m = components.len() / C`.
/// With one component per class the two functions agree draw for draw.
pub fn generate_multimodal_mixture(
    num_classes: usize,
    per_class: usize,
    components: &[Vec<f64>],
    cov_scale: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if num_classes < 2 {
        return Err(Error::InvalidDataset("need at least 2 classes".into()));
    }
    if components.is_empty() || !components.len().is_multiple_of(num_classes) {
        return Err(Error::InvalidDataset(format!(
            "{} components is not a positive multiple of {num_classes} classes",
            components.len()
        )));
    }
    let dim = components[0].len();
    if dim == 0 || components.iter().any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidDataset(
            "means must share a positive dimension and be finite".into(),
        ));
    }
    if !(cov_scale > 0.0 && cov_scale.is_finite()) {
        return Err(Error::InvalidDataset(format!(
            "cov_scale must be positive, got {cov_scale}"
        )));
    }
    let modes = components.len() / num_classes;
    let normal = Normal::new(0.0, cov_scale.sqrt())
        .map_err(|e| Error::InvalidDataset(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_classes * per_class);
    for label in 0..num_classes {
        for j in 0..per_class {
            let mean = &components[label + num_classes * (j % modes)];
            let features = mean.iter().map(|m| m + normal.sample(&mut rng)).collect();
            out.push(LabeledExample { features, label });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Split and batching
// ---------------------------------------------------------------------------

/// Shuffled partition of `source`. Each fraction is of the whole source:
/// `round(f·n)` rows go to test, validation and labeled training, and the
/// remainder becomes unlabeled training data.
pub fn split(
    source: &[LabeledExample],
    labeled_fraction: f64,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitDataset> {
    split_indexed(source, labeled_fraction, val_fraction, test_fraction, seed).map(|(s, _)| s)
}

pub fn split_indexed(
    source: &[LabeledExample],
    labeled_fraction: f64,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(SplitDataset, SplitIndices)> {
    if source.is_empty() {
        return Err(Error::InvalidDataset("empty source".into()));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidFractions(format!(
            "labeled_fraction {labeled_fraction} not in (0, 1]"
        )));
    }
    for (name, f) in [("val_fraction", val_fraction), ("test_fraction", test_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidFractions(format!("{name} {f} not in [0, 1)")));
        }
    }
    let n = source.len();
    let count = |f: f64| (f * n as f64).round() as usize;
    let (n_test, n_val, n_lab) = (count(test_fraction), count(val_fraction), count(labeled_fraction));
    if n_test + n_val + n_lab > n {
        return Err(Error::InvalidFractions(format!(
            "labeled {labeled_fraction} + val {val_fraction} + test {test_fraction} exceeds 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (test, rest) = order.split_at(n_test);
    let (val, rest) = rest.split_at(n_val);
    let (lab, unlab) = rest.split_at(n_lab);
    let indices = SplitIndices {
        labeled_train: lab.to_vec(),
        unlabeled_train: unlab.to_vec(),
        validation: val.to_vec(),
        test: test.to_vec(),
    };
    let pick = |ix: &[usize]| ix.iter().map(|&i| source[i].clone()).collect::<Vec<_>>();
    let split = SplitDataset {
        labeled_train: pick(lab),
        unlabeled_train: unlab.iter().map(|&i| UnlabeledExample::from(&source[i])).collect(),
        validation: pick(val),
        test: pick(test),
    };
    Ok((split, indices))
}

/// Index batches over `len` items for one epoch: a permutation keyed by
/// `(seed, epoch)`, cut into `batch_size` chunks with a short final chunk.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
