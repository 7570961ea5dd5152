//! Large-way evaluation, the traditional full confusion pass, estimator
//! cost measurement, and distractor-selection telemetry.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confusion::{soft_confusion, ConfusionMatrix, PredictiveDistribution, PROB_FLOOR};
use crate::dataset::{sample_instances, Dataset};
use crate::episode::EpisodeTraceRecord;
use crate::error::{Error, Result};
use crate::estimator::{estimate_step, EstimatorState, ObservationKind};
use crate::learner::{MetaLearner, SupportSet};
use crate::rng::{class_stream, substream_indexed, Stream};

/// Outcome of an all-way evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Class count of each evaluation task (always the full split).
    pub way: usize,
    /// Support instances per class.
    pub shot: usize,
    /// Mean fraction of queries whose argmax prediction is correct.
    pub accuracy: f64,
    /// Standard deviation of per-episode accuracy.
    pub accuracy_stddev: f64,
    /// Mean negative log probability of the true class on eval queries.
    pub mean_loss: f64,
    /// Per-class accuracy, averaged over episodes.
    pub per_class_accuracy: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
}

/// Evaluate with every class of the split in the support set.
///
/// Each episode draws `n_s` support and `n_q` query instances per class
/// (disjoint) and scores argmax accuracy over all queries; episodes use
/// deterministic sub-seeds of `seed`.
pub fn evaluate_all_way(
    dataset: &Dataset,
    learner: &dyn MetaLearner,
    n_s: usize,
    n_q: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let k = dataset.k();
    if k < 2 {
        return Err(Error::config("evaluation needs at least 2 classes"));
    }
    for c in 0..k {
        if dataset.class_len(c) < n_s + n_q {
            return Err(Error::dataset(format!(
                "class {c} has {} instances, evaluation needs {}",
                dataset.class_len(c),
                n_s + n_q
            )));
        }
    }
    let class_ids: Vec<usize> = (0..k).collect();
    let mut per_class_correct = vec![0usize; k];
    let mut episode_accuracies = Vec::with_capacity(episodes);
    let mut loss_sum = 0.0;
    for e in 0..episodes {
        let mut rng = substream_indexed(seed, "eval-episode", e as u64);
        let mut supports = Vec::with_capacity(k);
        let mut queries = Vec::with_capacity(k);
        for c in 0..k {
            let support_idx = sample_instances(dataset, c, n_s, &mut rng, &[])?;
            let query_idx = sample_instances(dataset, c, n_q, &mut rng, &support_idx)?;
            supports.push(dataset.gather(c, &support_idx));
            queries.push(dataset.gather(c, &query_idx));
        }
        let support = SupportSet::new(class_ids.clone(), supports)?;
        let mut correct = 0usize;
        for (c, query) in queries.iter().enumerate() {
            let probs = learner.predict(&support, query, 1.0)?;
            for row in probs.rows() {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = j;
                    }
                }
                if best == c {
                    correct += 1;
                    per_class_correct[c] += 1;
                }
                loss_sum -= row[c].max(PROB_FLOOR).ln();
            }
        }
        episode_accuracies.push(correct as f64 / (k * n_q) as f64);
    }
    let accuracy = mean(&episode_accuracies);
    let accuracy_stddev = stddev(&episode_accuracies, accuracy);
    let per_class_accuracy = per_class_correct
        .iter()
        .map(|&c| c as f64 / (episodes * n_q) as f64)
        .collect();
    Ok(EvalReport {
        way: k,
        shot: n_s,
        accuracy,
        accuracy_stddev,
        mean_loss: loss_sum / (episodes * k * n_q) as f64,
        per_class_accuracy,
        episodes,
        seed,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn stddev(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// The traditional confusion computation: one inference pass with all K
/// classes in the support, probabilities averaged per true class.
///
/// Instance draws go through the same per-class streams as
/// [`crate::estimator::observe_window`], so handing both functions
/// equal-state RNGs makes them see identical supports and queries.
pub fn traditional_confusion(
    dataset: &Dataset,
    learner: &dyn MetaLearner,
    n_s: usize,
    n_q: usize,
    temperature: f64,
    rng: &mut Stream,
) -> Result<ConfusionMatrix> {
    let k = dataset.k();
    if k < 2 {
        return Err(Error::config("confusion needs at least 2 classes"));
    }
    let base: u64 = rng.random();
    let class_ids: Vec<usize> = (0..k).collect();
    let mut supports = Vec::with_capacity(k);
    let mut queries = Vec::with_capacity(k);
    for &c in &class_ids {
        if dataset.class_len(c) < n_s + n_q {
            return Err(Error::dataset(format!(
                "class {c} has {} instances, confusion pass needs {}",
                dataset.class_len(c),
                n_s + n_q
            )));
        }
        let mut crng = class_stream(base, c);
        let support_idx = sample_instances(dataset, c, n_s, &mut crng, &[])?;
        let query_idx = sample_instances(dataset, c, n_q, &mut crng, &support_idx)?;
        supports.push(dataset.gather(c, &support_idx));
        queries.push(dataset.gather(c, &query_idx));
    }
    let support = SupportSet::new(class_ids.clone(), supports)?;
    let mut batches = Vec::with_capacity(k * n_q);
    for (c, query) in queries.iter().enumerate() {
        let probs = learner.predict(&support, query, temperature)?;
        for row in probs.rows() {
            batches.push((c, PredictiveDistribution::new(row.to_vec())?));
        }
    }
    soft_confusion(&batches, &class_ids)
}

/// One row of the estimator cost table.
#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub m_steps: usize,
    pub n_te: usize,
    /// Mean wall time of one confusion-matrix refresh (M estimator steps).
    pub refresh_ms: f64,
    /// Mean wall time of one traditional full pass.
    pub traditional_ms: f64,
    pub time_ratio: f64,
    /// Resident observation/probability matrix footprint vs the full pass,
    /// i.e. `n_te^2 / K^2`.
    pub footprint_ratio: f64,
}

/// Measure wall time per confusion-matrix refresh for estimator variants
/// against the traditional full pass. Single-threaded; reports ratios.
pub fn cme_benchmark(
    dataset: &Dataset,
    learner: &dyn MetaLearner,
    n_s: usize,
    n_q: usize,
    temperature: f64,
    configs: &[(usize, usize)],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<CostRow>> {
    if repetitions == 0 {
        return Err(Error::config("repetitions must be >= 1"));
    }
    let k = dataset.k();
    let start = Instant::now();
    for r in 0..repetitions {
        let mut rng = substream_indexed(seed, "bench-traditional", r as u64);
        traditional_confusion(dataset, learner, n_s, n_q, temperature, &mut rng)?;
    }
    let traditional_ms = start.elapsed().as_secs_f64() * 1e3 / repetitions as f64;

    let mut rows = Vec::with_capacity(configs.len());
    for (i, &(m_steps, n_te)) in configs.iter().enumerate() {
        let mut state = EstimatorState::new(k, 0.9, n_te, m_steps, temperature)?;
        let start = Instant::now();
        for r in 0..repetitions {
            let mut rng = substream_indexed(seed, "bench-cme", (i * repetitions + r) as u64);
            for _ in 0..m_steps {
                estimate_step(
                    dataset,
                    learner,
                    &mut state,
                    n_s,
                    n_q,
                    ObservationKind::Soft,
                    &mut rng,
                )?;
            }
        }
        let refresh_ms = start.elapsed().as_secs_f64() * 1e3 / repetitions as f64;
        rows.push(CostRow {
            m_steps,
            n_te,
            refresh_ms,
            traditional_ms,
            time_ratio: refresh_ms / traditional_ms,
            footprint_ratio: (n_te as f64 / k as f64).powi(2),
        });
    }
    Ok(rows)
}

/// Render a cost table as CSV.
pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut out =
        String::from("m_steps,n_te,refresh_ms,traditional_ms,time_ratio,footprint_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.6},{:.6}\n",
            r.m_steps, r.n_te, r.refresh_ms, r.traditional_ms, r.time_ratio, r.footprint_ratio
        ));
    }
    out
}

/// Count how often each class was selected as a distractor within an
/// episode range of a trace log (JSON lines, one episode per line).
pub fn attention_frequencies(
    trace_path: &Path,
    window: std::ops::Range<u64>,
    k: usize,
) -> Result<Vec<u64>> {
    let text = fs::read_to_string(trace_path)?;
    attention_frequencies_str(&text, window, k)
}

/// As [`attention_frequencies`], over in-memory trace text.
pub fn attention_frequencies_str(
    trace: &str,
    window: std::ops::Range<u64>,
    k: usize,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; k];
    for (lineno, line) in trace.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeTraceRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(lineno + 1, format!("bad trace record: {e}")))?;
        if !window.contains(&record.episode) {
            continue;
        }
        for distractors in &record.distractors {
            for &d in distractors {
                if d >= k {
                    return Err(Error::parse(
                        lineno + 1,
                        format!("distractor class {d} out of range for k={k}"),
                    ));
                }
                counts[d] += 1;
            }
        }
    }
    Ok(counts)
}
