//! Confusion-guided episode construction and the episode objective.
//!
//! Each episode samples target classes uniformly, then for every target
//! draws distractor classes from the target's confusion-matrix row
//! (diagonal excluded, renormalized). A task's support covers the target
//! plus its distractors; queries come from the target class only.

use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confusion::{ConfusionMatrix, PredictiveDistribution, PROB_FLOOR};
use crate::dataset::{sample_instances, Dataset};
use crate::error::{Error, Result};
use crate::learner::{MetaLearner, SupportSet};
use crate::rng::Stream;

/// Episode-shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Support instances per class.
    pub n_s: usize,
    /// Query instances per target.
    pub n_q: usize,
    /// Distractor classes per target.
    pub n_d: usize,
    /// Targets per episode.
    pub n_tc: usize,
}

impl EpisodeConfig {
    /// Default target count for a window size `n_te`: `(n_te * 2) / (n_d + 2)`,
    /// floored, at least 1.
    pub fn derived_targets(n_te: usize, n_d: usize) -> usize {
        ((n_te * 2) / (n_d + 2)).max(1)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.n_s == 0 || self.n_q == 0 || self.n_d == 0 || self.n_tc == 0 {
            return Err(Error::config("episode sizes must all be >= 1"));
        }
        if self.n_d > k.saturating_sub(1) {
            return Err(Error::config(format!(
                "n_d = {} exceeds k - 1 = {}",
                self.n_d,
                k.saturating_sub(1)
            )));
        }
        if self.n_tc > k {
            return Err(Error::config(format!("n_tc = {} exceeds k = {k}", self.n_tc)));
        }
        Ok(())
    }
}

/// One (target, distractors, support, query) unit consumed by a learner.
#[derive(Debug, Clone)]
pub struct EpisodeTask {
    pub target: usize,
    pub distractors: Vec<usize>,
    /// Support over `[target, distractors...]`, `n_s` instances per class.
    pub support: SupportSet,
    /// `n_q x d_in` query features, all of the target class.
    pub query: Array2<f64>,
    /// Instance indices backing the support, aligned with support class order.
    pub support_indices: Vec<(usize, Vec<usize>)>,
    /// Instance indices backing the query.
    pub query_indices: Vec<usize>,
}

impl EpisodeTask {
    pub fn validate(&self, cfg: &EpisodeConfig) -> Result<()> {
        if self.distractors.contains(&self.target) {
            return Err(Error::invalid("target appears among its distractors"));
        }
        let mut seen = std::collections::HashSet::new();
        for &d in &self.distractors {
            if !seen.insert(d) {
                return Err(Error::invalid(format!("duplicate distractor {d}")));
            }
        }
        if self.distractors.len() != cfg.n_d {
            return Err(Error::invalid("wrong distractor count"));
        }
        if self.support.way() != cfg.n_d + 1 || self.support.shots() != cfg.n_s {
            return Err(Error::invalid("support has wrong cardinality"));
        }
        if self.query.nrows() != cfg.n_q {
            return Err(Error::invalid("query has wrong cardinality"));
        }
        // Support and query instances of the target class must be disjoint.
        let target_support = self
            .support_indices
            .iter()
            .find(|(c, _)| *c == self.target)
            .map(|(_, idx)| idx.clone())
            .unwrap_or_default();
        for qi in &self.query_indices {
            if target_support.contains(qi) {
                return Err(Error::invalid("query instance reused in support"));
            }
        }
        Ok(())
    }
}

/// Renormalized off-diagonal confusion row: the probability of drawing each
/// class `j != target` as a distractor for `target`.
///
/// The returned vector has length `K - 1` and follows ascending class order
/// with the target skipped (see [`non_target_classes`]). All-zero rows fall
/// back to the uniform distribution so early-training episodes stay
/// well-formed.
pub fn distractor_probs(c: &ConfusionMatrix, target: usize) -> Result<Vec<f64>> {
    let k = c.k();
    if k < 2 {
        return Err(Error::config("need at least 2 classes to pick distractors"));
    }
    if target >= k {
        return Err(Error::invalid(format!("target {target} out of range for k={k}")));
    }
    let row = c.row(target);
    let mut probs: Vec<f64> = (0..k).filter(|&j| j != target).map(|j| row[j]).collect();
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in &mut probs {
            *p /= total;
        }
    } else {
        probs.fill(1.0 / (k - 1) as f64);
    }
    Ok(probs)
}

/// Class indices `j != target` in the order used by [`distractor_probs`].
pub fn non_target_classes(k: usize, target: usize) -> Vec<usize> {
    (0..k).filter(|&j| j != target).collect()
}

/// Draw `n_d` distinct indices into `probs` by sequential weighted sampling
/// without replacement (weights renormalized after every draw).
///
/// Zero-probability indices are drawn only once every positive-probability
/// index has been taken; the remainder is then drawn uniformly.
pub fn sample_distractors(probs: &[f64], n_d: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    if n_d > probs.len() {
        return Err(Error::config(format!(
            "cannot draw {n_d} distinct distractors from {} candidates",
            probs.len()
        )));
    }
    if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::invalid("distractor weights must be finite and nonnegative"));
    }
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let weights: Vec<f64> = probs.to_vec();
    let mut chosen = Vec::with_capacity(n_d);
    for _ in 0..n_d {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pick_pos = if total > 0.0 {
            let u: f64 = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut pos = remaining.len() - 1;
            for (p, &i) in remaining.iter().enumerate() {
                acc += weights[i];
                if u < acc {
                    pos = p;
                    break;
                }
            }
            // Guard the float edge: never land on a zero-weight candidate.
            while weights[remaining[pos]] == 0.0 && pos > 0 {
                pos -= 1;
            }
            pos
        } else {
            rng.random_range(0..remaining.len())
        };
        chosen.push(remaining.swap_remove(pick_pos));
    }
    Ok(chosen)
}

/// Sample one episode's worth of confusion tasks from `dataset` guided by
/// the confusion matrix `c`.
pub fn build_confusion_tasks(
    dataset: &Dataset,
    c: &ConfusionMatrix,
    cfg: &EpisodeConfig,
    rng: &mut Stream,
) -> Result<Vec<EpisodeTask>> {
    let k = dataset.k();
    cfg.validate(k)?;
    if c.k() != k {
        return Err(Error::invalid(format!(
            "confusion matrix is {}x{} but dataset has {k} classes",
            c.k(),
            c.k()
        )));
    }
    let targets = index_sample(rng, k, cfg.n_tc);
    let mut tasks = Vec::with_capacity(cfg.n_tc);
    for target in targets {
        let probs = distractor_probs(c, target)?;
        let candidates = non_target_classes(k, target);
        let picks = sample_distractors(&probs, cfg.n_d, rng)?;
        let distractors: Vec<usize> = picks.into_iter().map(|p| candidates[p]).collect();

        let mut class_ids = Vec::with_capacity(cfg.n_d + 1);
        class_ids.push(target);
        class_ids.extend_from_slice(&distractors);
        let mut support_indices = Vec::with_capacity(class_ids.len());
        let mut instances = Vec::with_capacity(class_ids.len());
        for &class in &class_ids {
            let need = if class == target {
                cfg.n_s + cfg.n_q
            } else {
                cfg.n_s
            };
            if dataset.class_len(class) < need {
                return Err(Error::dataset(format!(
                    "class {class} has {} instances, episode needs {need}",
                    dataset.class_len(class)
                )));
            }
            let idx = sample_instances(dataset, class, cfg.n_s, rng, &[])?;
            instances.push(dataset.gather(class, &idx));
            support_indices.push((class, idx));
        }
        let target_support = support_indices[0].1.clone();
        let query_indices = sample_instances(dataset, target, cfg.n_q, rng, &target_support)?;
        let query = dataset.gather(target, &query_indices);
        let task = EpisodeTask {
            target,
            distractors,
            support: SupportSet::new(class_ids, instances)?,
            query,
            support_indices,
            query_indices,
        };
        tasks.push(task);
    }
    Ok(tasks)
}

/// The episode objective `J` plus each task's per-query distributions.
///
/// `J = (1/(n_tc * n_q)) * sum log P(target | x)` with probabilities over
/// only the `n_d + 1` classes of each task's support. Probabilities are
/// floored at 1e-12 before the log; training maximizes `J`.
pub fn episode_loss(
    tasks: &[EpisodeTask],
    learner: &dyn MetaLearner,
    temperature: f64,
) -> Result<(f64, Vec<Vec<PredictiveDistribution>>)> {
    if tasks.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n_q = tasks[0].query.nrows();
    let mut j = 0.0;
    let mut all_dists = Vec::with_capacity(tasks.len());
    for task in tasks {
        if task.query.nrows() != n_q {
            return Err(Error::invalid("tasks must share the same query count"));
        }
        let target_pos = task
            .support
            .position_of(task.target)
            .ok_or_else(|| Error::invalid("target class missing from its support"))?;
        let probs = learner.predict(&task.support, &task.query, temperature)?;
        let mut dists = Vec::with_capacity(n_q);
        for row in probs.rows() {
            j += row[target_pos].max(PROB_FLOOR).ln();
            dists.push(PredictiveDistribution::new(row.to_vec())?);
        }
        all_dists.push(dists);
    }
    j /= (tasks.len() * n_q) as f64;
    Ok((j, all_dists))
}

/// One line of the episode trace log (JSON lines format).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTraceRecord {
    pub episode: u64,
    pub targets: Vec<usize>,
    pub distractors: Vec<Vec<usize>>,
    pub j: f64,
}
