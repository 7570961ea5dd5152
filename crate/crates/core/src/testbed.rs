//! Frozen-learner fixtures for estimator audits and statistical tests.
//!
//! These learners have a *known* confusion table, so the estimators that
//! observe them can be checked against ground truth. Instances of the
//! companion datasets encode their class index in coordinate 0 (and a
//! per-instance noise value in coordinate 1), which the frozen learners
//! read back instead of doing real inference.

use ndarray::Array2;

use crate::confusion::{ConfusionMatrix, MatrixKind};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::learner::{MetaLearner, SupportSet};

/// Dataset whose class-`c` instances carry `c` in coordinate 0 and a
/// stratified noise value `(i + 0.5) / n` in coordinate 1.
pub fn tagged_dataset(k: usize, n_per_class: usize, extra_dims: usize) -> Dataset {
    let d = 2 + extra_dims;
    let features = (0..k)
        .map(|c| {
            let mut m = Array2::zeros((n_per_class, d));
            for i in 0..n_per_class {
                m[[i, 0]] = c as f64;
                m[[i, 1]] = (i as f64 + 0.5) / n_per_class as f64;
            }
            m
        })
        .collect();
    Dataset::from_parts(Split::MetaTrain, features, None).unwrap()
}

fn class_of(x: f64, k: usize) -> Result<usize> {
    let c = x.round();
    if c < 0.0 || c >= k as f64 {
        return Err(Error::invalid(format!(
            "tagged instance names class {c}, table has {k}"
        )));
    }
    Ok(c as usize)
}

/// Restrict a table row to the support's classes and renormalize. This is
/// exactly how a fixed metric-based learner behaves when handed a subset of
/// classes: per-class scores do not depend on which other classes are
/// present, so probabilities are the full-table row renormalized.
fn restricted_row(table: &ConfusionMatrix, class: usize, support_ids: &[usize]) -> Vec<f64> {
    let weights: Vec<f64> = support_ids.iter().map(|&c| table.get(class, c)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.into_iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / support_ids.len() as f64; support_ids.len()]
    }
}

/// Deterministic learner: outputs its table's row (restricted to the
/// support's classes, renormalized) for every query. Temperature is ignored;
/// the table already is the final distribution.
#[derive(Debug, Clone)]
pub struct FrozenTableLearner {
    table: ConfusionMatrix,
}

impl FrozenTableLearner {
    pub fn new(table: ConfusionMatrix) -> Result<Self> {
        if table.kind() != MatrixKind::Soft {
            return Err(Error::invalid("frozen learner table must be kind=Soft"));
        }
        Ok(FrozenTableLearner { table })
    }

    /// Learner confused uniformly among all classes.
    pub fn uniform(k: usize) -> Self {
        FrozenTableLearner {
            table: ConfusionMatrix::uniform(k),
        }
    }

    /// Perfect learner: one-hot on the true class.
    pub fn identity(k: usize) -> Self {
        let table =
            ConfusionMatrix::new(MatrixKind::Soft, Array2::from_diag_elem(k, 1.0)).unwrap();
        FrozenTableLearner { table }
    }

    pub fn table(&self) -> &ConfusionMatrix {
        &self.table
    }
}

impl MetaLearner for FrozenTableLearner {
    fn predict(
        &self,
        support: &SupportSet,
        queries: &Array2<f64>,
        _temperature: f64,
    ) -> Result<Array2<f64>> {
        let ids = support.class_ids();
        let mut out = Array2::zeros((queries.nrows(), ids.len()));
        for (r, q) in queries.rows().into_iter().enumerate() {
            let class = class_of(q[0], self.table.k())?;
            let row = restricted_row(&self.table, class, ids);
            for (c, p) in row.into_iter().enumerate() {
                out[[r, c]] = p;
            }
        }
        Ok(out)
    }
}

/// Stochastic-by-instance learner: answers with a one-hot prediction drawn
/// by inverse CDF of the restricted table row at the instance's baked-in
/// noise coordinate. Over a stratified instance pool the empirical mean of
/// these one-hots approaches the restricted row, which makes Monte Carlo
/// estimates of the confusion matrix meaningful.
#[derive(Debug, Clone)]
pub struct IndicatorTableLearner {
    table: ConfusionMatrix,
}

impl IndicatorTableLearner {
    pub fn new(table: ConfusionMatrix) -> Result<Self> {
        if table.kind() != MatrixKind::Soft {
            return Err(Error::invalid("indicator learner table must be kind=Soft"));
        }
        Ok(IndicatorTableLearner { table })
    }

    pub fn table(&self) -> &ConfusionMatrix {
        &self.table
    }
}

impl MetaLearner for IndicatorTableLearner {
    fn predict(
        &self,
        support: &SupportSet,
        queries: &Array2<f64>,
        _temperature: f64,
    ) -> Result<Array2<f64>> {
        let ids = support.class_ids();
        let mut out = Array2::zeros((queries.nrows(), ids.len()));
        for (r, q) in queries.rows().into_iter().enumerate() {
            let class = class_of(q[0], self.table.k())?;
            let u = q[1];
            let row = restricted_row(&self.table, class, ids);
            let mut acc = 0.0;
            let mut pick = ids.len() - 1;
            for (c, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            out[[r, pick]] = 1.0;
        }
        Ok(out)
    }
}
