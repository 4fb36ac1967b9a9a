//! Datasets: loaders, preprocessing, subsampling and a synthetic generator.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Vector};
use crate::rng::{stream, Purpose};

/// Labelled samples. Invariants: `y[i] ∈ {−1, +1}`, `x.nrows() == y.len()`,
/// every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub y: Vector,
    pub name: String,
    pub source: String,
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: Vector, name: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows vs labels",
                expected: y.len(),
                found: x.nrows(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("dataset features"));
        }
        if y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::ArgumentOutOfRange("labels must be ±1".into()));
        }
        Ok(Self {
            x,
            y,
            name: name.into(),
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Maps the two distinct raw labels, sorted ascending, to `(−1, +1)`. A
/// single observed label maps to `+1` if positive, else `−1`.
fn map_labels(raw: &[f64]) -> Result<Vector> {
    let distinct: BTreeSet<u64> = raw.iter().map(|v| order_key(*v)).collect();
    if distinct.len() > 2 {
        return Err(Error::MoreThanTwoClasses { found: distinct.len() });
    }
    let keys: Vec<u64> = distinct.into_iter().collect();
    Ok(Vector::from_iterator(
        raw.len(),
        raw.iter().map(|&v| match keys.len() {
            2 if order_key(v) == keys[0] => -1.0,
            2 => 1.0,
            _ if v > 0.0 => 1.0,
            _ => -1.0,
        }),
    ))
}

/// Total-order key for finite floats, with `-0.0 == 0.0`.
fn order_key(v: f64) -> u64 {
    let v = if v == 0.0 { 0.0 } else { v };
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn parse_number(token: &str, line: usize) -> Result<f64> {
    let value: f64 = token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {token:?}"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite value: {token:?}"),
        });
    }
    Ok(value)
}

/// Parses libsvm text (`label idx:val ...`, 1-based ascending indices).
pub fn parse_libsvm(text: &str) -> Result<(DenseMatrix, Vector)> {
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut dim = 0;
    for (lineno, raw_line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = parse_number(tokens.next().unwrap_or_default(), line_no)?;
        let mut entries = Vec::new();
        let mut last = 0;
        for token in tokens {
            let (idx, val) = token.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected idx:val, got {token:?}"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature index {idx:?}"),
            })?;
            if idx == 0 || idx <= last {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("feature indices must be 1-based and ascending, got {idx}"),
                });
            }
            last = idx;
            entries.push((idx - 1, parse_number(val, line_no)?));
        }
        dim = dim.max(last);
        labels.push(label);
        rows.push(entries);
    }
    let mut x = DenseMatrix::zeros(rows.len(), dim);
    for (i, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            x[(i, j)] = v;
        }
    }
    Ok((x, map_labels(&labels)?))
}

pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let (x, y) = parse_libsvm(&text)?;
    Dataset::new(x, y, file_stem(path), path.display().to_string())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a numeric CSV; `label_column` is extracted and the rest forms `X`.
pub fn load_csv(path: impl AsRef<Path>, label_column: usize, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut width = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRows {
                row,
                expected,
                found: record.len(),
            });
        }
        if label_column >= expected {
            return Err(Error::IndexOutOfRange {
                index: label_column,
                len: expected,
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::ParseCell {
                    row,
                    col,
                    message: format!("not a finite number: {cell:?}"),
                })?;
            if col == label_column {
                labels.push(value);
            } else {
                values.push(value);
            }
        }
    }
    let d = width.map_or(0, |w| w - 1);
    let x = DenseMatrix::from_row_slice(labels.len(), d, &values);
    Dataset::new(x, map_labels(&labels)?, file_stem(path), path.display().to_string())
}

/// Centers each column and scales it to unit population standard deviation.
/// Constant columns pass through unchanged.
pub fn standardize(ds: &Dataset) -> Dataset {
    let n = ds.len() as f64;
    let mut x = ds.x.clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= 1e-12 * (1.0 + mean.abs()) {
            log::info!("standardize: column {j} has zero variance, left unchanged");
            continue;
        }
        col.apply(|v| *v = (*v - mean) / sd);
    }
    Dataset { x, ..ds.clone() }
}

/// `n_keep` rows drawn uniformly without replacement, kept in original order.
pub fn subsample(ds: &Dataset, n_keep: usize, seed: u64) -> Result<Dataset> {
    if n_keep > ds.len() {
        return Err(Error::TooFewRows {
            requested: n_keep,
            available: ds.len(),
        });
    }
    let mut rng = stream(seed, Purpose::Data, 1);
    let mut rows = index::sample(&mut rng, ds.len(), n_keep).into_vec();
    rows.sort_unstable();
    let x = ds.x.select_rows(&rows);
    let y = ds.y.select_rows(&rows);
    Ok(Dataset {
        x,
        y,
        name: ds.name.clone(),
        source: format!("{} (subsample {n_keep}, seed {seed})", ds.source),
    })
}

/// `n/2` points per class from `N(±(separation/2)·e₁, I_d)`; the first half
/// is labelled `−1`.
pub fn synth_two_gaussians(n: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) || d == 0 || !separation.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!(
            "synthetic data needs even n > 0, d ≥ 1, finite separation (n={n}, d={d}, separation={separation})"
        )));
    }
    let mut rng = stream(seed, Purpose::Data, 0);
    let mut x = DenseMatrix::zeros(n, d);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let label = if i < n / 2 { -1.0 } else { 1.0 };
        y[i] = label;
        for j in 0..d {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
        x[(i, 0)] += label * separation / 2.0;
    }
    Dataset::new(
        x,
        y,
        "two-gaussians",
        format!("synthetic n={n} d={d} separation={separation} seed={seed}"),
    )
}
