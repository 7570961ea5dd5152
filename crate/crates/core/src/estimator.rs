//! Incremental estimation of the full K x K confusion matrix from small
//! windowed observations.
//!
//! Each step samples `n_te` classes, measures the learner's confusion among
//! them only (an `n_te x n_te` observation), and blends the observation into
//! the running estimate `E`:
//!
//! `E[v_i, v_j] <- rho * E[v_i, v_j] + (1 - rho) * E'[i, j] * z_i`
//!
//! where `z_i` is the pre-update mass of row `v_i` inside the window. The
//! scaling keeps every row of `E` summing to 1: the window's share of a row
//! is redistributed according to the observation while the out-of-window
//! share is untouched. With `rho = 0` and a window covering all K classes
//! the step reduces to the traditional full confusion computation.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::confusion::{ConfusionMatrix, MatrixKind};
use crate::dataset::{sample_instances, Dataset};
use crate::error::{Error, Result};
use crate::learner::{MetaLearner, SupportSet};
use crate::rng::{class_stream, substream, Stream};

/// How a window observation summarizes learner predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    /// Accumulate predicted probabilities (the soft confusion matrix).
    Soft,
    /// Accumulate argmax indicators (the count-based variant); ties break
    /// toward the lowest class index.
    ArgmaxCount,
}

/// The running estimate `E` plus the estimator hyperparameters.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    e: ConfusionMatrix,
    rho: f64,
    n_te: usize,
    m_steps: usize,
    temperature: f64,
    steps: u64,
}

impl EstimatorState {
    /// Fresh estimator over `k` classes; every entry of `E` starts at `1/K`.
    pub fn new(k: usize, rho: f64, n_te: usize, m_steps: usize, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::config(format!("rho = {rho} outside [0, 1]")));
        }
        if n_te < 2 || n_te > k {
            return Err(Error::config(format!(
                "window size n_te = {n_te} must satisfy 2 <= n_te <= K = {k}"
            )));
        }
        if m_steps == 0 {
            return Err(Error::config("m_steps must be >= 1"));
        }
        if !(temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(EstimatorState {
            e: ConfusionMatrix::uniform(k),
            rho,
            n_te,
            m_steps,
            temperature,
            steps: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.e.k()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n_te(&self) -> usize {
        self.n_te
    }

    pub fn m_steps(&self) -> usize {
        self.m_steps
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn matrix(&self) -> &ConfusionMatrix {
        &self.e
    }

    /// Copy of `E` taken at the start of an episode (`C <- E`).
    pub fn snapshot(&self) -> ConfusionMatrix {
        self.e.clone()
    }

    /// Replace `E` wholesale (the traditional full-computation mode).
    pub fn set_matrix(&mut self, m: ConfusionMatrix) -> Result<()> {
        if m.k() != self.k() {
            return Err(Error::invalid(format!(
                "matrix is {}x{}, estimator tracks {} classes",
                m.k(),
                m.k(),
                self.k()
            )));
        }
        m.validate()?;
        self.e = m;
        self.steps += 1;
        Ok(())
    }

    /// Row sums must stay within `tol` of 1.
    pub fn check_rows(&self, tol: f64) -> Result<()> {
        for (i, row) in self.e.as_array().rows().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::numerical(format!(
                    "estimate row {i} sums to {sum}"
                )));
            }
            if row.iter().any(|&x| x < 0.0) {
                return Err(Error::numerical(format!("estimate row {i} went negative")));
            }
        }
        Ok(())
    }

    /// Checkpoint: one metadata line, then the matrix in CSV form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "rho={},n_te={},m_steps={},temperature={},steps={}\n",
            self.rho, self.n_te, self.m_steps, self.temperature, self.steps
        );
        out.push_str(&self.e.to_csv_string());
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let (meta, rest) = text
            .split_once('\n')
            .ok_or_else(|| Error::parse(1, "missing estimator metadata line"))?;
        let mut fields = std::collections::HashMap::new();
        for part in meta.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::parse(1, format!("bad field `{part}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn field<T: std::str::FromStr>(
            fields: &std::collections::HashMap<String, String>,
            key: &str,
        ) -> Result<T> {
            fields
                .get(key)
                .ok_or_else(|| Error::parse(1, format!("missing `{key}`")))?
                .parse()
                .map_err(|_| Error::parse(1, format!("bad value for `{key}`")))
        }
        let e = ConfusionMatrix::from_csv_str(rest)?;
        if e.kind() != MatrixKind::Soft {
            return Err(Error::parse(2, "estimator matrix must have kind=Soft"));
        }
        let mut state = EstimatorState::new(
            e.k(),
            field(&fields, "rho")?,
            field(&fields, "n_te")?,
            field(&fields, "m_steps")?,
            field(&fields, "temperature")?,
        )?;
        state.steps = field(&fields, "steps")?;
        state.e = e;
        Ok(state)
    }
}

/// One windowed observation: the sampled classes and their local confusion.
#[derive(Debug, Clone)]
pub struct WindowObservation {
    class_ids: Vec<usize>,
    e_prime: ConfusionMatrix,
}

impl WindowObservation {
    pub fn new(class_ids: Vec<usize>, e_prime: ConfusionMatrix) -> Result<Self> {
        if class_ids.len() != e_prime.k() {
            return Err(Error::invalid("window size and observation size differ"));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(Error::invalid(format!("duplicate class {c} in window")));
            }
        }
        e_prime.validate()?;
        Ok(WindowObservation { class_ids, e_prime })
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn e_prime(&self) -> &ConfusionMatrix {
        &self.e_prime
    }
}

/// Sample a window of `n_te` classes and measure the learner's confusion
/// among them.
///
/// Support (`n_s` per class, jointly over the window) and per-class query
/// sets (`n_q` each, disjoint from that class's support) are drawn through
/// per-class streams derived from one value pulled off `rng`, so an
/// equal-state `rng` yields the same instance draws as
/// [`crate::evaluate::traditional_confusion`].
pub fn observe_window(
    dataset: &Dataset,
    learner: &dyn MetaLearner,
    state: &EstimatorState,
    n_s: usize,
    n_q: usize,
    kind: ObservationKind,
    rng: &mut Stream,
) -> Result<WindowObservation> {
    if dataset.k() != state.k() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, estimator tracks {}",
            dataset.k(),
            state.k()
        )));
    }
    if n_s == 0 || n_q == 0 {
        return Err(Error::config("n_s and n_q must be >= 1"));
    }
    let n_te = state.n_te();
    let base: u64 = rng.random();
    let mut window_rng = substream(base, "window");
    let class_ids: Vec<usize> = index_sample(&mut window_rng, dataset.k(), n_te).into_iter().collect();
    window_confusion(dataset, learner, &class_ids, n_s, n_q, state.temperature(), kind, base)
}

/// Measure the learner's confusion among the given classes (shared by the
/// windowed estimator and the full traditional pass).
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_confusion(
    dataset: &Dataset,
    learner: &dyn MetaLearner,
    class_ids: &[usize],
    n_s: usize,
    n_q: usize,
    temperature: f64,
    kind: ObservationKind,
    draw_base: u64,
) -> Result<WindowObservation> {
    let n_te = class_ids.len();
    let mut supports = Vec::with_capacity(n_te);
    let mut queries = Vec::with_capacity(n_te);
    for &class in class_ids {
        let need = n_s + n_q;
        if dataset.class_len(class) < need {
            return Err(Error::dataset(format!(
                "class {class} has {} instances, estimation needs {need}",
                dataset.class_len(class)
            )));
        }
        let mut crng = class_stream(draw_base, class);
        let support_idx = sample_instances(dataset, class, n_s, &mut crng, &[])?;
        let query_idx = sample_instances(dataset, class, n_q, &mut crng, &support_idx)?;
        supports.push(dataset.gather(class, &support_idx));
        queries.push(dataset.gather(class, &query_idx));
    }
    let support = SupportSet::new(class_ids.to_vec(), supports)?;

    let mut e_prime = Array2::<f64>::zeros((n_te, n_te));
    for (m, query) in queries.iter().enumerate() {
        let probs = learner.predict(&support, query, temperature)?;
        match kind {
            ObservationKind::Soft => {
                for row in probs.rows() {
                    for (n, &p) in row.iter().enumerate() {
                        e_prime[[m, n]] += p;
                    }
                }
            }
            ObservationKind::ArgmaxCount => {
                for row in probs.rows() {
                    let mut best = 0;
                    for (n, &p) in row.iter().enumerate().skip(1) {
                        if p > row[best] {
                            best = n;
                        }
                    }
                    e_prime[[m, best]] += 1.0;
                }
            }
        }
    }
    e_prime.mapv_inplace(|x| x / n_q as f64);
    WindowObservation::new(
        class_ids.to_vec(),
        ConfusionMatrix::new(MatrixKind::Soft, e_prime)?,
    )
}

/// Blend a window observation into the running estimate.
///
/// For window rows `i` (class `v_i`): `z_i` is the pre-update sum of
/// `E[v_i, v_j]` over all window columns `j` (diagonal included), and every
/// window entry becomes `rho * E[v_i, v_j] + (1 - rho) * E'[i, j] * z_i`.
/// Entries outside the window are untouched; row sums are preserved.
pub fn apply_update(state: &mut EstimatorState, obs: &WindowObservation) -> Result<()> {
    let k = state.k();
    for &c in obs.class_ids() {
        if c >= k {
            return Err(Error::invalid(format!(
                "window class {c} out of range for K={k}"
            )));
        }
    }
    let rho = state.rho;
    let e = state.e.as_array_mut();
    let e_prime = obs.e_prime().as_array();
    for (i, &vi) in obs.class_ids().iter().enumerate() {
        let z: f64 = obs.class_ids().iter().map(|&vj| e[[vi, vj]]).sum();
        let updated: Vec<f64> = obs
            .class_ids()
            .iter()
            .enumerate()
            .map(|(j, &vj)| rho * e[[vi, vj]] + (1.0 - rho) * e_prime[[i, j]] * z)
            .collect();
        for (j, &vj) in obs.class_ids().iter().enumerate() {
            e[[vi, vj]] = updated[j];
        }
    }
    state.steps += 1;
    Ok(())
}

/// One estimator step: observe a window, then blend it in. The caller loops
/// this `m_steps` times per episode.
pub fn estimate_step(
    dataset: &Dataset,
    learner: &dyn MetaLearner,
    state: &mut EstimatorState,
    n_s: usize,
    n_q: usize,
    kind: ObservationKind,
    rng: &mut Stream,
) -> Result<()> {
    let obs = observe_window(dataset, learner, state, n_s, n_q, kind, rng)?;
    apply_update(state, &obs)
}
