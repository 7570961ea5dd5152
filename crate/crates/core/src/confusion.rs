//! Dense confusion matrices: raw counts, row normalization, and the
//! probability-averaged ("soft") variant.
//!
//! A confusion matrix is K x K with rows indexed by true class and columns
//! by predicted class. Count matrices hold nonnegative tallies; normalized
//! and soft matrices are row-stochastic (every row sums to 1).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Tolerance for row-stochasticity checks.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Probability floor applied before taking logs of predicted probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// What the entries of a [`ConfusionMatrix`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    /// Raw misclassification tallies.
    Count,
    /// Counts divided by their row sums.
    RowNormalized,
    /// Mean predicted probability per (true, predicted) pair.
    Soft,
}

impl MatrixKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatrixKind::Count => "Count",
            MatrixKind::RowNormalized => "RowNormalized",
            MatrixKind::Soft => "Soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Count" => Ok(MatrixKind::Count),
            "RowNormalized" => Ok(MatrixKind::RowNormalized),
            "Soft" => Ok(MatrixKind::Soft),
            other => Err(Error::invalid(format!("unknown matrix kind `{other}`"))),
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Square matrix of inter-class confusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    kind: MatrixKind,
    data: Array2<f64>,
}

impl ConfusionMatrix {
    /// Wrap an existing matrix, validating the invariants for `kind`.
    pub fn new(kind: MatrixKind, data: Array2<f64>) -> Result<Self> {
        let m = ConfusionMatrix { kind, data };
        m.validate()?;
        Ok(m)
    }

    /// The uniform row-stochastic matrix (every entry 1/K).
    pub fn uniform(k: usize) -> Self {
        ConfusionMatrix {
            kind: MatrixKind::Soft,
            data: Array2::from_elem((k, k), 1.0 / k as f64),
        }
    }

    /// All-zero count matrix.
    pub fn zero_counts(k: usize) -> Self {
        ConfusionMatrix {
            kind: MatrixKind::Count,
            data: Array2::zeros((k, k)),
        }
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    /// Number of classes (rows = columns).
    pub fn k(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> f64 {
        self.data[[true_class, predicted]]
    }

    pub fn row(&self, true_class: usize) -> ArrayView1<'_, f64> {
        self.data.row(true_class)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub(crate) fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    /// Check squareness, nonnegativity and (for stochastic kinds) row sums.
    pub fn validate(&self) -> Result<()> {
        if self.data.nrows() != self.data.ncols() {
            return Err(Error::invalid(format!(
                "confusion matrix must be square, got {}x{}",
                self.data.nrows(),
                self.data.ncols()
            )));
        }
        if self.data.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::invalid(
                "confusion matrix entries must be finite and nonnegative",
            ));
        }
        if matches!(self.kind, MatrixKind::RowNormalized | MatrixKind::Soft) {
            for (i, row) in self.data.rows().into_iter().enumerate() {
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::invalid(format!(
                        "row {i} of a {} matrix sums to {sum}, expected 1",
                        self.kind
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean over rows of the L1 distance to another matrix of equal size.
    pub fn mean_row_l1(&self, other: &ConfusionMatrix) -> Result<f64> {
        if self.k() != other.k() {
            return Err(Error::invalid(format!(
                "size mismatch: {} vs {}",
                self.k(),
                other.k()
            )));
        }
        let k = self.k();
        let total: f64 = (0..k)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(other.row(i).iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        Ok(total / k as f64)
    }

    /// Serialize as CSV: header line `k=<K>,kind=<kind>`, then K row-major rows.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("k={},kind={}\n", self.k(), self.kind);
        for row in self.data.rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    /// Parse the CSV form produced by [`ConfusionMatrix::to_csv_string`].
    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty matrix file"))?;
        let (k, kind) = parse_matrix_header(header)?;
        let mut data = Array2::zeros((k, k));
        let mut rows_seen = 0;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if rows_seen >= k {
                return Err(Error::parse(lineno + 1, format!("more than {k} data rows")));
            }
            let entries: Vec<&str> = line.split(',').collect();
            if entries.len() != k {
                return Err(Error::parse(
                    lineno + 1,
                    format!("expected {k} entries, got {}", entries.len()),
                ));
            }
            for (j, e) in entries.iter().enumerate() {
                data[[rows_seen, j]] = e
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(lineno + 1, format!("bad number: {e}")))?;
            }
            rows_seen += 1;
        }
        if rows_seen != k {
            return Err(Error::parse(
                rows_seen + 1,
                format!("expected {k} data rows, got {rows_seen}"),
            ));
        }
        ConfusionMatrix::new(kind, data)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        Self::from_csv_str(&s)
    }
}

pub(crate) fn parse_matrix_header(header: &str) -> Result<(usize, MatrixKind)> {
    let mut k = None;
    let mut kind = None;
    for part in header.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("bad header field `{part}`")))?;
        match key.trim() {
            "k" => {
                k = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| Error::parse(1, format!("bad k: {e}")))?,
                )
            }
            "kind" => kind = Some(MatrixKind::parse(value.trim())?),
            other => return Err(Error::parse(1, format!("unknown header key `{other}`"))),
        }
    }
    match (k, kind) {
        (Some(k), Some(kind)) => Ok((k, kind)),
        _ => Err(Error::parse(1, "header must contain k=<K>,kind=<kind>")),
    }
}

/// A probability vector over the W classes present in an episode's support.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(format!(
                "predictive distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::invalid(
                "predictive distribution entries must be finite and nonnegative",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!(
                "predictive distribution sums to {sum}, expected 1"
            )));
        }
        Ok(PredictiveDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Tally (true, predicted) pairs into a K x K count matrix.
pub fn count_confusion(
    predictions: &[(usize, usize)],
    k: usize,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::zero_counts(k);
    for &(truth, predicted) in predictions {
        if truth >= k || predicted >= k {
            return Err(Error::invalid(format!(
                "class pair ({truth},{predicted}) out of range for k={k}"
            )));
        }
        m.as_array_mut()[[truth, predicted]] += 1.0;
    }
    Ok(m)
}

/// Divide each row of a count matrix by its sum. Rows with no observations
/// become the uniform row 1/K so downstream multinomial sampling stays
/// well-defined.
pub fn normalize_rows(m: &ConfusionMatrix) -> ConfusionMatrix {
    let k = m.k();
    let mut data = m.as_array().clone();
    for mut row in data.rows_mut() {
        let sum: f64 = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|x| x / sum);
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    ConfusionMatrix {
        kind: MatrixKind::RowNormalized,
        data,
    }
}

/// Average predicted probabilities per true class into a W x W soft matrix.
///
/// `class_ids` fixes the row/column order; each distribution in `batches`
/// must be over exactly those W classes in that order. Every class in
/// `class_ids` must contribute at least one query instance.
pub fn soft_confusion(
    batches: &[(usize, PredictiveDistribution)],
    class_ids: &[usize],
) -> Result<ConfusionMatrix> {
    let w = class_ids.len();
    if w < 2 {
        return Err(Error::invalid("soft confusion needs at least 2 classes"));
    }
    let mut sums = Array2::<f64>::zeros((w, w));
    let mut counts = vec![0usize; w];
    for (truth, dist) in batches {
        let row = class_ids
            .iter()
            .position(|c| c == truth)
            .ok_or_else(|| {
                Error::invalid(format!("true class {truth} not among class_ids"))
            })?;
        if dist.len() != w {
            return Err(Error::invalid(format!(
                "distribution over {} classes, expected {w}",
                dist.len()
            )));
        }
        for (j, &p) in dist.probs().iter().enumerate() {
            sums[[row, j]] += p;
        }
        counts[row] += 1;
    }
    for (m, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::invalid(format!(
                "class {} has zero query instances",
                class_ids[m]
            )));
        }
        let inv = 1.0 / n as f64;
        sums.row_mut(m).mapv_inplace(|x| x * inv);
    }
    ConfusionMatrix::new(MatrixKind::Soft, sums)
}
