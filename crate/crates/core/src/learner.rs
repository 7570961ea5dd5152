//! Metric-based few-shot learners over a small trainable MLP embedding.
//!
//! Two heads turn a support set into class probabilities for a query:
//! prototype distances (softmax over negative squared distances to per-class
//! mean embeddings) and attention matching (softmax over cosine similarities
//! to individual support embeddings, summed per class). Gradients of the
//! episode loss are computed by hand with reverse-mode passes through both
//! heads and the MLP.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::confusion::{PredictiveDistribution, PROB_FLOOR};
use crate::episode::EpisodeTask;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Norm regularizer for cosine similarity with degenerate embeddings.
const NORM_EPS: f64 = 1e-12;

/// Which probability head to use on top of the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Prototypical,
    Matching,
}

impl LearnerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prototypical" => Ok(LearnerKind::Prototypical),
            "matching" => Ok(LearnerKind::Matching),
            other => Err(Error::config(format!(
                "unknown learner `{other}` (expected prototypical|matching)"
            ))),
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerKind::Prototypical => f.write_str("prototypical"),
            LearnerKind::Matching => f.write_str("matching"),
        }
    }
}

/// One dense layer (or the same-shaped gradient slot).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LayerTensors {
    fn zeros_like(other: &LayerTensors) -> Self {
        LayerTensors {
            weights: Array2::zeros(other.weights.raw_dim()),
            biases: Array1::zeros(other.biases.raw_dim()),
        }
    }
}

/// MLP embedding parameters: ReLU hidden layers, linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams {
    layers: Vec<LayerTensors>,
}

/// Gradient with the same nesting as [`LearnerParams`].
#[derive(Debug, Clone)]
pub struct Gradient {
    pub layers: Vec<LayerTensors>,
}

impl Gradient {
    pub fn zeros_like(params: &LearnerParams) -> Self {
        Gradient {
            layers: params.layers.iter().map(LayerTensors::zeros_like).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }
}

impl LearnerParams {
    /// Seeded initialization: entries uniform in `+-1/sqrt(fan_in)` per layer.
    pub fn init(d_in: usize, hidden: &[usize], d_emb: usize, rng: &mut Stream) -> Self {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_emb);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng.random_range(-bound..bound)
                });
                let biases = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                LayerTensors { weights, biases }
            })
            .collect();
        LearnerParams { layers }
    }

    pub fn from_layers(layers: Vec<LayerTensors>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("at least one layer required"));
        }
        for pair in layers.windows(2) {
            if pair[0].weights.nrows() != pair[1].weights.ncols() {
                return Err(Error::invalid("layer shapes do not chain"));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.nrows() != l.biases.len() {
                return Err(Error::invalid(format!("layer {i}: bias length mismatch")));
            }
            if l.weights.iter().chain(l.biases.iter()).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite entries")));
            }
        }
        Ok(LearnerParams { layers })
    }

    pub fn layers(&self) -> &[LayerTensors] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn d_emb(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Visit every parameter entry mutably, in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            for x in l.weights.iter_mut() {
                f(x);
            }
            for x in l.biases.iter_mut() {
                f(x);
            }
        }
    }

    /// Deterministic forward pass: ReLU after every layer but the last.
    pub fn embed(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::invalid(format!(
                "input has {} entries, embedding expects {}",
                x.len(),
                self.d_in()
            )));
        }
        Ok(self.forward_trace(x).output().to_owned())
    }

    fn forward_trace(&self, x: ArrayView1<f64>) -> ForwardTrace {
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        activations.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(activations.last().unwrap()) + &layer.biases;
            if i + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        ForwardTrace { activations }
    }

    /// Reverse pass for one input; `out_grad` is d(loss)/d(embedding).
    fn backprop_into(&self, trace: &ForwardTrace, out_grad: &Array1<f64>, grads: &mut Gradient) {
        let n = self.layers.len();
        let mut delta = out_grad.clone();
        for i in (0..n).rev() {
            // Post-activation gradients equal pre-activation gradients for the
            // linear output layer; hidden layers gate by the ReLU mask.
            if i + 1 < n {
                let act = &trace.activations[i + 1];
                for (d, &a) in delta.iter_mut().zip(act.iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.activations[i];
            let g = &mut grads.layers[i];
            for (r, &dr) in delta.iter().enumerate() {
                g.biases[r] += dr;
                let mut row = g.weights.row_mut(r);
                for (c, &ic) in input.iter().enumerate() {
                    row[c] += dr * ic;
                }
            }
            if i > 0 {
                delta = self.layers[i].weights.t().dot(&delta);
            }
        }
    }

    /// Text checkpoint; floats are written in shortest round-trip form, so a
    /// load reproduces bit-identical inference.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "version=1,d_in={},d_emb={},layers={}\n",
            self.d_in(),
            self.d_emb(),
            self.layers.len()
        );
        for (i, l) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "layer={i},in={},out={}\n",
                l.weights.ncols(),
                l.weights.nrows()
            ));
            for row in l.weights.rows() {
                let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            let line: Vec<String> = l.biases.iter().map(|x| format!("{x}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
        let fields = parse_kv_line(header, 1)?;
        let n_layers: usize = lookup(&fields, "layers", 1)?;
        if lookup::<u32>(&fields, "version", 1)? != 1 {
            return Err(Error::parse(1, "unsupported checkpoint version"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (lineno, lh) = lines
                .next()
                .ok_or_else(|| Error::parse(0, "truncated checkpoint"))?;
            let lf = parse_kv_line(lh, lineno + 1)?;
            let n_in: usize = lookup(&lf, "in", lineno + 1)?;
            let n_out: usize = lookup(&lf, "out", lineno + 1)?;
            let mut weights = Array2::zeros((n_out, n_in));
            for r in 0..n_out {
                let (lineno, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(0, "truncated checkpoint"))?;
                let vals = parse_floats(line, lineno + 1, n_in)?;
                weights.row_mut(r).assign(&Array1::from_vec(vals));
            }
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(0, "truncated checkpoint"))?;
            let biases = Array1::from_vec(parse_floats(line, lineno + 1, n_out)?);
            layers.push(LayerTensors { weights, biases });
        }
        LearnerParams::from_layers(layers)
    }
}

fn parse_kv_line(line: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    line.split(',')
        .map(|part| {
            part.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::parse(lineno, format!("bad field `{part}`")))
        })
        .collect()
}

fn lookup<T: std::str::FromStr>(fields: &[(String, String)], key: &str, lineno: usize) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::parse(lineno, format!("missing field `{key}`")))?
        .1
        .parse()
        .map_err(|_| Error::parse(lineno, format!("bad value for `{key}`")))
}

fn parse_floats(line: &str, lineno: usize, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(lineno, format!("bad number: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expect {
        return Err(Error::parse(
            lineno,
            format!("expected {expect} values, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i+1]` the post-activation
    /// output of layer `i` (post-ReLU for hidden layers, linear for the last).
    activations: Vec<Array1<f64>>,
}

impl ForwardTrace {
    fn output(&self) -> &Array1<f64> {
        self.activations.last().unwrap()
    }
}

/// Labeled support instances for one task: `W >= 2` distinct classes with an
/// equal number of instances each.
#[derive(Debug, Clone)]
pub struct SupportSet {
    class_ids: Vec<usize>,
    /// Per class (aligned with `class_ids`): `n_s x d_in`.
    instances: Vec<Array2<f64>>,
}

impl SupportSet {
    pub fn new(class_ids: Vec<usize>, instances: Vec<Array2<f64>>) -> Result<Self> {
        if class_ids.len() < 2 {
            return Err(Error::invalid("support set needs at least 2 classes"));
        }
        if class_ids.len() != instances.len() {
            return Err(Error::invalid("class_ids and instances length mismatch"));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(Error::invalid(format!("duplicate class {c} in support")));
            }
        }
        let n_s = instances[0].nrows();
        let d_in = instances[0].ncols();
        for (i, m) in instances.iter().enumerate() {
            if m.nrows() != n_s || m.ncols() != d_in || n_s == 0 {
                return Err(Error::invalid(format!(
                    "support class {} must have {n_s} x {d_in} instances",
                    class_ids[i]
                )));
            }
        }
        Ok(SupportSet {
            class_ids,
            instances,
        })
    }

    pub fn way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn shots(&self) -> usize {
        self.instances[0].nrows()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn class_instances(&self, pos: usize) -> &Array2<f64> {
        &self.instances[pos]
    }

    /// Position of a class id within this support, if present.
    pub fn position_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

/// Anything that maps (support, queries) to per-class probabilities.
///
/// Rows of the returned matrix follow the query order, columns follow
/// `support.class_ids()`. Every row must be a probability distribution.
pub trait MetaLearner {
    fn predict(
        &self,
        support: &SupportSet,
        queries: &Array2<f64>,
        temperature: f64,
    ) -> Result<Array2<f64>>;
}

/// The trainable learner: an embedding plus one of the two heads.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLearner<'a> {
    pub params: &'a LearnerParams,
    pub kind: LearnerKind,
}

impl<'a> EmbeddingLearner<'a> {
    pub fn new(params: &'a LearnerParams, kind: LearnerKind) -> Self {
        EmbeddingLearner { params, kind }
    }
}

impl MetaLearner for EmbeddingLearner<'_> {
    fn predict(
        &self,
        support: &SupportSet,
        queries: &Array2<f64>,
        temperature: f64,
    ) -> Result<Array2<f64>> {
        let ctx = EmbeddedSupport::build(self.params, support)?;
        let mut out = Array2::zeros((queries.nrows(), support.way()));
        for (r, q) in queries.rows().into_iter().enumerate() {
            let e_q = self.params.embed(q)?;
            let probs = match self.kind {
                LearnerKind::Prototypical => ctx.prototype_probs(&e_q, temperature),
                LearnerKind::Matching => ctx.matching_probs(&e_q, temperature),
            };
            out.row_mut(r).assign(&Array1::from_vec(probs));
        }
        Ok(out)
    }
}

/// Support embeddings precomputed once per task.
struct EmbeddedSupport {
    /// `W x d_emb` class means.
    prototypes: Array2<f64>,
    /// All support embeddings, flattened: `(W * n_s) x d_emb`.
    embeddings: Array2<f64>,
    /// Class position (column index) of each flattened support instance.
    owner: Vec<usize>,
    way: usize,
}

impl EmbeddedSupport {
    fn build(params: &LearnerParams, support: &SupportSet) -> Result<Self> {
        let way = support.way();
        let n_s = support.shots();
        let d_emb = params.d_emb();
        let mut embeddings = Array2::zeros((way * n_s, d_emb));
        let mut prototypes = Array2::zeros((way, d_emb));
        let mut owner = Vec::with_capacity(way * n_s);
        for w in 0..way {
            for s in 0..n_s {
                let e = params.embed(support.class_instances(w).row(s))?;
                embeddings.row_mut(w * n_s + s).assign(&e);
                prototypes.row_mut(w).scaled_add(1.0 / n_s as f64, &e);
                owner.push(w);
            }
        }
        Ok(EmbeddedSupport {
            prototypes,
            embeddings,
            owner,
            way,
        })
    }

    fn prototype_probs(&self, e_q: &Array1<f64>, temperature: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .prototypes
            .rows()
            .into_iter()
            .map(|c| {
                let d2: f64 = e_q
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -d2 / temperature
            })
            .collect();
        softmax(&logits)
    }

    fn matching_probs(&self, e_q: &Array1<f64>, temperature: f64) -> Vec<f64> {
        let nq = e_q.dot(e_q).sqrt() + NORM_EPS;
        let sims: Vec<f64> = self
            .embeddings
            .rows()
            .into_iter()
            .map(|s| {
                let ns = s.dot(&s).sqrt() + NORM_EPS;
                e_q.dot(&s) / (nq * ns) / temperature
            })
            .collect();
        let attention = softmax(&sims);
        let mut probs = vec![0.0; self.way];
        for (a, &w) in attention.iter().zip(self.owner.iter()) {
            probs[w] += a;
        }
        probs
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities for `query` by softmax over negative squared
/// distances to per-class prototype embeddings.
pub fn prototypical_probs(
    params: &LearnerParams,
    support: &SupportSet,
    query: ArrayView1<f64>,
    temperature: f64,
) -> Result<PredictiveDistribution> {
    let ctx = EmbeddedSupport::build(params, support)?;
    let e_q = params.embed(query)?;
    PredictiveDistribution::new(ctx.prototype_probs(&e_q, temperature))
}

/// Class probabilities for `query` by cosine attention over all individual
/// support embeddings, summed per class.
pub fn matching_probs(
    params: &LearnerParams,
    support: &SupportSet,
    query: ArrayView1<f64>,
    temperature: f64,
) -> Result<PredictiveDistribution> {
    let ctx = EmbeddedSupport::build(params, support)?;
    let e_q = params.embed(query)?;
    PredictiveDistribution::new(ctx.matching_probs(&e_q, temperature))
}

/// Exact gradient of the negative episode objective with respect to every
/// parameter entry, accumulated over all tasks and queries.
///
/// The objective is `J = (1/(n_tc * n_q)) * sum log P(target | x)` with
/// probabilities over each task's own support classes; this returns
/// `d(-J)/d(params)`.
pub fn loss_gradient(
    params: &LearnerParams,
    tasks: &[EpisodeTask],
    kind: LearnerKind,
    temperature: f64,
) -> Result<Gradient> {
    let mut grads = Gradient::zeros_like(params);
    if tasks.is_empty() {
        return Ok(grads);
    }
    let n_q = tasks[0].query.nrows();
    let scale = 1.0 / (tasks.len() as f64 * n_q as f64);
    for task in tasks {
        if task.query.nrows() != n_q {
            return Err(Error::invalid("tasks must share the same query count"));
        }
        match kind {
            LearnerKind::Prototypical => {
                accumulate_prototypical(params, task, temperature, scale, &mut grads)?
            }
            LearnerKind::Matching => {
                accumulate_matching(params, task, temperature, scale, &mut grads)?
            }
        }
    }
    for (i, l) in grads.layers.iter().enumerate() {
        if l.weights.iter().chain(l.biases.iter()).any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite gradient in layer {i}"
            )));
        }
    }
    Ok(grads)
}

fn accumulate_prototypical(
    params: &LearnerParams,
    task: &EpisodeTask,
    temperature: f64,
    scale: f64,
    grads: &mut Gradient,
) -> Result<()> {
    let support = &task.support;
    let way = support.way();
    let n_s = support.shots();
    let target_pos = support
        .position_of(task.target)
        .ok_or_else(|| Error::invalid("target class missing from its support"))?;

    let mut traces: Vec<Vec<ForwardTrace>> = Vec::with_capacity(way);
    let mut prototypes = Array2::zeros((way, params.d_emb()));
    for w in 0..way {
        let mut class_traces = Vec::with_capacity(n_s);
        for s in 0..n_s {
            let t = params.forward_trace(support.class_instances(w).row(s));
            prototypes.row_mut(w).scaled_add(1.0 / n_s as f64, t.output());
            class_traces.push(t);
        }
        traces.push(class_traces);
    }

    let mut proto_grads = Array2::<f64>::zeros((way, params.d_emb()));
    for q in task.query.rows() {
        let trace_q = params.forward_trace(q);
        let e_q = trace_q.output();
        let logits: Vec<f64> = (0..way)
            .map(|w| {
                let diff = e_q - &prototypes.row(w);
                -diff.dot(&diff) / temperature
            })
            .collect();
        let probs = softmax(&logits);
        if probs[target_pos] < PROB_FLOOR {
            // The objective uses the floored constant here; zero gradient.
            continue;
        }
        let mut grad_q = Array1::<f64>::zeros(params.d_emb());
        for w in 0..way {
            let g_logit = scale * (probs[w] - f64::from(u8::from(w == target_pos)));
            let g_dist = -g_logit / temperature;
            let diff = e_q - &prototypes.row(w);
            grad_q.scaled_add(2.0 * g_dist, &diff);
            proto_grads.row_mut(w).scaled_add(-2.0 * g_dist, &diff);
        }
        params.backprop_into(&trace_q, &grad_q, grads);
    }
    for w in 0..way {
        let per_support = proto_grads.row(w).mapv(|x| x / n_s as f64);
        for t in &traces[w] {
            params.backprop_into(t, &per_support, grads);
        }
    }
    Ok(())
}

fn accumulate_matching(
    params: &LearnerParams,
    task: &EpisodeTask,
    temperature: f64,
    scale: f64,
    grads: &mut Gradient,
) -> Result<()> {
    let support = &task.support;
    let way = support.way();
    let n_s = support.shots();
    let target_pos = support
        .position_of(task.target)
        .ok_or_else(|| Error::invalid("target class missing from its support"))?;

    let mut traces = Vec::with_capacity(way * n_s);
    let mut owner = Vec::with_capacity(way * n_s);
    for w in 0..way {
        for s in 0..n_s {
            traces.push(params.forward_trace(support.class_instances(w).row(s)));
            owner.push(w);
        }
    }
    let n_sup = traces.len();
    let mut support_grads = vec![Array1::<f64>::zeros(params.d_emb()); n_sup];

    for q in task.query.rows() {
        let trace_q = params.forward_trace(q);
        let e_q = trace_q.output();
        let norm_q = e_q.dot(e_q).sqrt();
        let nq = norm_q + NORM_EPS;
        let mut sims = Vec::with_capacity(n_sup);
        let mut norms = Vec::with_capacity(n_sup);
        for t in &traces {
            let s = t.output();
            let ns = s.dot(s).sqrt() + NORM_EPS;
            norms.push(ns);
            sims.push(e_q.dot(s) / (nq * ns));
        }
        let logits: Vec<f64> = sims.iter().map(|&g| g / temperature).collect();
        let attention = softmax(&logits);
        let mut probs = vec![0.0; way];
        for (a, &w) in attention.iter().zip(owner.iter()) {
            probs[w] += a;
        }
        if probs[target_pos] < PROB_FLOOR {
            continue;
        }
        // d(-J)/d(p_target), then through the per-class sums into attention.
        let g_p_target = -scale / probs[target_pos];
        let g_att: Vec<f64> = owner
            .iter()
            .map(|&w| if w == target_pos { g_p_target } else { 0.0 })
            .collect();
        let inner: f64 = attention.iter().zip(g_att.iter()).map(|(a, g)| a * g).sum();
        let g_logits: Vec<f64> = attention
            .iter()
            .zip(g_att.iter())
            .map(|(a, g)| a * (g - inner))
            .collect();

        let q_hat = if norm_q > 0.0 {
            e_q.mapv(|x| x / norm_q)
        } else {
            Array1::zeros(params.d_emb())
        };
        let mut grad_q = Array1::<f64>::zeros(params.d_emb());
        for (i, t) in traces.iter().enumerate() {
            let g_sim = g_logits[i] / temperature;
            if g_sim == 0.0 {
                continue;
            }
            let s = t.output();
            let norm_s = norms[i] - NORM_EPS;
            // d(sim)/d(e_q) = s/(nq*ns) - sim/nq * unit(e_q)
            grad_q.scaled_add(g_sim / (nq * norms[i]), s);
            grad_q.scaled_add(-g_sim * sims[i] / nq, &q_hat);
            let s_hat = if norm_s > 0.0 {
                s.mapv(|x| x / norm_s)
            } else {
                Array1::zeros(params.d_emb())
            };
            support_grads[i].scaled_add(g_sim / (nq * norms[i]), e_q);
            support_grads[i].scaled_add(-g_sim * sims[i] / norms[i], &s_hat);
        }
        params.backprop_into(&trace_q, &grad_q, grads);
    }
    for (t, g) in traces.iter().zip(support_grads.iter()) {
        if g.iter().any(|&x| x != 0.0) {
            params.backprop_into(t, g, grads);
        }
    }
    Ok(())
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!(
                "unknown optimizer `{other}` (expected sgd|adam)"
            ))),
        }
    }
}

/// Optimizer state; Adam keeps first/second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Option<(Vec<LayerTensors>, Vec<LayerTensors>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: None,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update of `params <- params - lr * direction(grad)`.
    pub fn step(&mut self, params: &mut LearnerParams, grad: &Gradient, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.layers.iter_mut().zip(grad.layers.iter()) {
                    p.weights.scaled_add(-lr, &g.weights);
                    p.biases.scaled_add(-lr, &g.biases);
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_none() {
                    self.moments = Some((
                        params.layers.iter().map(LayerTensors::zeros_like).collect(),
                        params.layers.iter().map(LayerTensors::zeros_like).collect(),
                    ));
                }
                self.step += 1;
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                let (m, v) = self.moments.as_mut().unwrap();
                for ((p, g), (m, v)) in params
                    .layers
                    .iter_mut()
                    .zip(grad.layers.iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    adam_update(
                        p.weights.as_slice_mut().unwrap(),
                        g.weights.as_slice().unwrap(),
                        m.weights.as_slice_mut().unwrap(),
                        v.weights.as_slice_mut().unwrap(),
                        lr,
                        self.beta1,
                        self.beta2,
                        self.eps,
                        bc1,
                        bc2,
                    );
                    adam_update(
                        p.biases.as_slice_mut().unwrap(),
                        g.biases.as_slice().unwrap(),
                        m.biases.as_slice_mut().unwrap(),
                        v.biases.as_slice_mut().unwrap(),
                        lr,
                        self.beta1,
                        self.beta2,
                        self.eps,
                        bc1,
                        bc2,
                    );
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer update on `params` given the gradient of the negative
/// episode objective.
pub fn sgd_step(params: &mut LearnerParams, grad: &Gradient, lr: f64, opt: &mut Optimizer) {
    opt.step(params, grad, lr);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn identity_params(d: usize) -> LearnerParams {
        LearnerParams::from_layers(vec![LayerTensors {
            weights: Array2::eye(d),
            biases: Array1::zeros(d),
        }])
        .unwrap()
    }

    fn support_from(vectors: &[(usize, Vec<Vec<f64>>)]) -> SupportSet {
        let class_ids = vectors.iter().map(|(c, _)| *c).collect();
        let instances = vectors
            .iter()
            .map(|(_, rows)| {
                let d = rows[0].len();
                let mut m = Array2::zeros((rows.len(), d));
                for (r, row) in rows.iter().enumerate() {
                    m.row_mut(r).assign(&Array1::from_vec(row.clone()));
                }
                m
            })
            .collect();
        SupportSet::new(class_ids, instances).unwrap()
    }

    #[test]
    fn zero_params_embed_to_zero() {
        let params = LearnerParams::from_layers(vec![
            LayerTensors {
                weights: Array2::zeros((3, 2)),
                biases: Array1::zeros(3),
            },
            LayerTensors {
                weights: Array2::zeros((2, 3)),
                biases: Array1::zeros(2),
            },
        ])
        .unwrap();
        let e = params.embed(array![1.0, -2.0].view()).unwrap();
        assert_eq!(e, array![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let params = identity_params(2);
        let e = params.embed(array![1.0, 2.0].view()).unwrap();
        assert_eq!(e, array![1.0, 2.0]);
    }

    #[test]
    fn embed_rejects_shape_mismatch() {
        let params = identity_params(2);
        assert!(params.embed(array![1.0, 2.0, 3.0].view()).is_err());
    }

    // Independent re-implementation of the forward pass with plain loops.
    fn forward_oracle(params: &LearnerParams, x: &[f64]) -> Vec<f64> {
        let n = params.layers().len();
        let mut h: Vec<f64> = x.to_vec();
        for (i, layer) in params.layers().iter().enumerate() {
            let mut z = vec![0.0; layer.biases.len()];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut acc = layer.biases[r];
                for (c, &hc) in h.iter().enumerate() {
                    acc += layer.weights[[r, c]] * hc;
                }
                *zr = if i + 1 < n { acc.max(0.0) } else { acc };
            }
            h = z;
        }
        h
    }

    #[test]
    fn embed_matches_duplicate_forward_oracle() {
        let mut rng = substream(42, "forward");
        let params = LearnerParams::init(5, &[7, 6], 4, &mut rng);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = params.embed(Array1::from_vec(x.clone()).view()).unwrap();
            let want = forward_oracle(&params, &x);
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn prototypical_equidistant_query_is_uniform() {
        let params = identity_params(2);
        let support = support_from(&[
            (0, vec![vec![1.0, 0.0]]),
            (1, vec![vec![-1.0, 0.0]]),
            (2, vec![vec![0.0, 1.0]]),
            (3, vec![vec![0.0, -1.0]]),
        ]);
        let p = prototypical_probs(&params, &support, array![0.0, 0.0].view(), 1.0).unwrap();
        for &x in p.probs() {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn prototypical_is_confident_at_a_far_prototype() {
        let params = identity_params(2);
        let support = support_from(&[
            (0, vec![vec![0.0, 0.0]]),
            (1, vec![vec![10.0, 0.0]]),
            (2, vec![vec![0.0, 10.0]]),
        ]);
        let p = prototypical_probs(&params, &support, array![0.0, 0.0].view(), 1.0).unwrap();
        assert!(p.probs()[0] >= 1.0 - 2.0 * (-50.0f64).exp());
    }

    // Brute-force distance/softmax oracle on a 3-class toy instance.
    #[test]
    fn prototypical_matches_brute_force_oracle() {
        let mut rng = substream(7, "proto-oracle");
        let params = LearnerParams::init(4, &[5], 3, &mut rng);
        let mk_vec = |rng: &mut crate::rng::Stream| -> Vec<f64> {
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let support = support_from(&[
            (0, vec![mk_vec(&mut rng), mk_vec(&mut rng)]),
            (1, vec![mk_vec(&mut rng), mk_vec(&mut rng)]),
            (2, vec![mk_vec(&mut rng), mk_vec(&mut rng)]),
        ]);
        let query = Array1::from_vec(mk_vec(&mut rng));
        let temperature = 0.7;
        let got = prototypical_probs(&params, &support, query.view(), temperature).unwrap();

        // Oracle: prototypes and softmax by hand.
        let mut logits = Vec::new();
        let e_q = forward_oracle(&params, query.as_slice().unwrap());
        for w in 0..3 {
            let rows = support.class_instances(w);
            let mut proto = vec![0.0; 3];
            for r in rows.rows() {
                let e = forward_oracle(&params, r.as_slice().unwrap());
                for (p, v) in proto.iter_mut().zip(e.iter()) {
                    *p += v / 2.0;
                }
            }
            let d2: f64 = e_q
                .iter()
                .zip(proto.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            logits.push(-d2 / temperature);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (g, e) in got.probs().iter().zip(exps.iter()) {
            assert_abs_diff_eq!(*g, e / z, epsilon = 1e-9);
        }
    }

    #[test]
    fn matching_identical_embeddings_give_count_proportional_probs() {
        // Zero weights embed everything to the same point.
        let params = LearnerParams::from_layers(vec![LayerTensors {
            weights: Array2::zeros((2, 2)),
            biases: Array1::zeros(2),
        }])
        .unwrap();
        let support = support_from(&[
            (0, vec![vec![1.0, 0.0], vec![2.0, 0.0]]),
            (1, vec![vec![0.0, 1.0], vec![0.0, 2.0]]),
            (2, vec![vec![3.0, 3.0], vec![4.0, 4.0]]),
        ]);
        let p = matching_probs(&params, &support, array![1.0, 1.0].view(), 1.0).unwrap();
        for &x in p.probs() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matching_low_temperature_selects_the_matching_support() {
        let params = identity_params(2);
        let support = support_from(&[
            (0, vec![vec![1.0, 0.0]]),
            (1, vec![vec![0.0, 1.0]]),
            (2, vec![vec![-1.0, 0.0]]),
        ]);
        let p = matching_probs(&params, &support, array![1.0, 0.0].view(), 1e-4).unwrap();
        assert!(p.probs()[0] > 1.0 - 1e-9, "got {:?}", p.probs());
    }

    // Independent cosine/softmax oracle on a random instance.
    #[test]
    fn matching_matches_brute_force_oracle() {
        let mut rng = substream(8, "match-oracle");
        let params = LearnerParams::init(4, &[6], 3, &mut rng);
        let mk_vec = |rng: &mut crate::rng::Stream| -> Vec<f64> {
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let support = support_from(&[
            (5, vec![mk_vec(&mut rng), mk_vec(&mut rng)]),
            (9, vec![mk_vec(&mut rng), mk_vec(&mut rng)]),
        ]);
        let query = Array1::from_vec(mk_vec(&mut rng));
        let temperature = 0.5;
        let got = matching_probs(&params, &support, query.view(), temperature).unwrap();

        let e_q = forward_oracle(&params, query.as_slice().unwrap());
        let nq = e_q.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
        let mut sims = Vec::new();
        let mut owners = Vec::new();
        for w in 0..2 {
            for r in support.class_instances(w).rows() {
                let e = forward_oracle(&params, r.as_slice().unwrap());
                let ns = e.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
                let dot: f64 = e_q.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
                sims.push(dot / (nq * ns) / temperature);
                owners.push(w);
            }
        }
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut want = vec![0.0; 2];
        for (e, &w) in exps.iter().zip(owners.iter()) {
            want[w] += e / z;
        }
        for (g, w) in got.probs().iter().zip(want.iter()) {
            assert_abs_diff_eq!(*g, *w, epsilon = 1e-9);
        }
    }

    #[test]
    fn plain_sgd_subtracts_scaled_gradient() {
        let mut rng = substream(3, "sgd");
        let mut params = LearnerParams::init(2, &[], 2, &mut rng);
        let before = params.clone();
        let mut grad = Gradient::zeros_like(&params);
        grad.layers[0].weights[[0, 0]] = 2.0;
        grad.layers[0].biases[1] = -4.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        sgd_step(&mut params, &grad, 0.1, &mut opt);
        assert_abs_diff_eq!(
            params.layers()[0].weights[[0, 0]],
            before.layers()[0].weights[[0, 0]] - 0.2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            params.layers()[0].biases[1],
            before.layers()[0].biases[1] + 0.4,
            epsilon = 1e-15
        );
        // lr = 0 leaves parameters untouched.
        let snapshot = params.clone();
        sgd_step(&mut params, &grad, 0.0, &mut opt);
        assert_eq!(params, snapshot);
    }

    #[test]
    fn adam_descends_a_fixed_quadratic() {
        // Minimize f(w) = sum (w - 3)^2 over a 1-layer parameter block.
        let mut params = LearnerParams::from_layers(vec![LayerTensors {
            weights: Array2::zeros((2, 2)),
            biases: Array1::zeros(2),
        }])
        .unwrap();
        let loss = |p: &LearnerParams| -> f64 {
            let mut acc = 0.0;
            for l in p.layers() {
                for x in l.weights.iter().chain(l.biases.iter()) {
                    acc += (x - 3.0) * (x - 3.0);
                }
            }
            acc
        };
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let initial = loss(&params);
        for _ in 0..100 {
            let mut grad = Gradient::zeros_like(&params);
            for (pl, gl) in params.layers().iter().zip(grad.layers.iter_mut()) {
                gl.weights.assign(&pl.weights.mapv(|x| 2.0 * (x - 3.0)));
                gl.biases.assign(&pl.biases.mapv(|x| 2.0 * (x - 3.0)));
            }
            let g = grad;
            sgd_step(&mut params, &g, 0.05, &mut opt);
        }
        assert!(loss(&params) < initial * 0.2, "loss {}", loss(&params));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut rng = substream(17, "ckpt");
        let params = LearnerParams::init(6, &[5], 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        params.save(&path).unwrap();
        let back = LearnerParams::load(&path).unwrap();
        assert_eq!(back, params);
        let x = Array1::from_vec((0..6).map(|i| 0.3 * i as f64 - 1.0).collect());
        let a = params.embed(x.view()).unwrap();
        let b = back.embed(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translation_of_final_bias_leaves_prototypical_probs_unchanged() {
        let mut rng = substream(23, "shift");
        let params = LearnerParams::init(3, &[4], 3, &mut rng);
        let mut shifted = params.clone();
        let last = shifted.layers.len() - 1;
        shifted.layers[last].biases += 7.5;
        let support = support_from(&[
            (0, vec![vec![0.3, -0.1, 0.4], vec![0.0, 0.2, 0.1]]),
            (1, vec![vec![-0.5, 0.8, 0.0], vec![0.9, -0.3, 0.2]]),
        ]);
        let q = array![0.1, 0.1, -0.2];
        let a = prototypical_probs(&params, &support, q.view(), 1.0).unwrap();
        let b = prototypical_probs(&shifted, &support, q.view(), 1.0).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }
}
