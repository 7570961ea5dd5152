//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use confusable_core::{
    episode_loss, loss_gradient, EmbeddingLearner, EpisodeTask, Gradient, LearnerKind,
    LearnerParams, SupportSet,
};
use ndarray::{Array1, Array2};

/// Build a task directly from raw vectors (bypassing dataset sampling).
pub fn manual_task(
    target: usize,
    distractors: Vec<usize>,
    support: Vec<(usize, Vec<Vec<f64>>)>,
    query: Vec<Vec<f64>>,
) -> EpisodeTask {
    let class_ids: Vec<usize> = support.iter().map(|(c, _)| *c).collect();
    let instances: Vec<Array2<f64>> = support
        .iter()
        .map(|(_, rows)| rows_to_matrix(rows))
        .collect();
    let support_indices = support
        .iter()
        .map(|(c, rows)| (*c, (0..rows.len()).collect()))
        .collect();
    let nq = query.len();
    EpisodeTask {
        target,
        distractors,
        support: SupportSet::new(class_ids, instances).unwrap(),
        query: rows_to_matrix(&query),
        support_indices,
        query_indices: (0..nq).collect(),
    }
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows[0].len();
    let mut m = Array2::zeros((rows.len(), d));
    for (r, row) in rows.iter().enumerate() {
        m.row_mut(r).assign(&Array1::from_vec(row.clone()));
    }
    m
}

/// Flatten a gradient in the same order as `LearnerParams::for_each_param_mut`.
pub fn flatten_gradient(grad: &Gradient) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &grad.layers {
        out.extend(l.weights.iter().copied());
        out.extend(l.biases.iter().copied());
    }
    out
}

/// Central finite differences of the negative episode objective, computed
/// entirely through the forward path (`episode_loss`), independent of the
/// analytic backward pass.
pub fn finite_difference_gradient(
    params: &LearnerParams,
    tasks: &[EpisodeTask],
    kind: LearnerKind,
    temperature: f64,
    h: f64,
) -> Vec<f64> {
    let n = params.num_params();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let loss_at = |delta: f64| -> f64 {
            let mut p = params.clone();
            let mut idx = 0;
            p.for_each_param_mut(|x| {
                if idx == i {
                    *x += delta;
                }
                idx += 1;
            });
            let learner = EmbeddingLearner::new(&p, kind);
            let (j, _) = episode_loss(tasks, &learner, temperature).unwrap();
            -j
        };
        grad.push((loss_at(h) - loss_at(-h)) / (2.0 * h));
    }
    grad
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error between the analytic gradient and finite differences.
pub fn max_gradient_error(
    params: &LearnerParams,
    tasks: &[EpisodeTask],
    kind: LearnerKind,
    temperature: f64,
) -> f64 {
    let analytic = flatten_gradient(&loss_gradient(params, tasks, kind, temperature).unwrap());
    let numeric = finite_difference_gradient(params, tasks, kind, temperature, 1e-5);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
