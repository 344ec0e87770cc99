//! Row-normalized confusion matrices and their symmetrization.

use std::path::Path;

use crate::error::{format, invalid, shape, Result};
use crate::io::write_atomic;

/// `values[i * n + j]` is the fraction of class-`i` images predicted as `j`.
/// Rows of classes without any images are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub values: Vec<f64>,
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.is_empty() {
        return Err(invalid("confusion matrix of an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = num_classes;
    let mut counts = vec![0usize; n * n];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n || y >= n {
            return Err(invalid(format!("class index out of range for {n} classes")));
        }
        counts[y * n + p] += 1;
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let row = &counts[i * n..(i + 1) * n];
        let support: usize = row.iter().sum();
        if support > 0 {
            for j in 0..n {
                values[i * n + j] = row[j] as f64 / support as f64;
            }
        }
    }
    Ok(ConfusionMatrix {
        class_names: default_class_names(n),
        values,
    })
}

impl ConfusionMatrix {
    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.values[i * n..(i + 1) * n]
    }

    /// Rows with no ground-truth images.
    pub fn zero_support(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.row(i).iter().all(|&v| v == 0.0)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.values.len() != n * n {
            return Err(shape("confusion matrix is not square"));
        }
        for i in 0..n {
            let row = self.row(i);
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(invalid(format!("confusion row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if s != 0.0 && (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("confusion row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// CSV: a header of class names, then one row of fractions per class.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.class_names)?;
        for i in 0..self.len() {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.into_inner().map_err(|e| format(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let class_names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let n = class_names.len();
        let mut values = Vec::with_capacity(n * n);
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != n {
                return Err(format(format!("confusion row has {} fields, expected {n}", rec.len())));
            }
            for f in rec.iter() {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| format(format!("bad confusion value {f:?}")))?,
                );
            }
            rows += 1;
        }
        if rows != n {
            return Err(shape(format!("confusion CSV has {rows} rows for {n} classes")));
        }
        let m = Self { class_names, values };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&crate::io::read_file(path)?)
    }
}

/// Symmetric similarity between classes, `S = (C + C^T) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Checks exact symmetry and non-negativity.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(shape(format!(
                "{} values for a {n}x{n} similarity matrix",
                values.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(invalid("similarities must be finite and non-negative"));
                }
                if v != values[j * n + i] {
                    return Err(invalid(format!("similarity matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..self.n {
            for j in i + 1..self.n {
                m = m.max(self.get(i, j));
            }
        }
        m
    }
}

/// Each pair is computed once and written to both halves. Classes without
/// support get zero similarity to everything.
pub fn symmetrize(c: &ConfusionMatrix) -> Result<SimilarityMatrix> {
    let n = c.len();
    if c.values.len() != n * n {
        return Err(shape("confusion matrix is not square"));
    }
    let dead = c.zero_support();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = if dead[i] || dead[j] {
                0.0
            } else {
                0.5 * (c.get(i, j) + c.get(j, i))
            };
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    SimilarityMatrix::new(n, values)
}
