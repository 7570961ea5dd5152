//! The episode loop: snapshot the confusion estimate, build confusion tasks,
//! update the learner on the episode objective, then refresh the estimate.
//!
//! Four modes share the loop. `confusable` refreshes the estimate with
//! windowed soft observations, `confusable-count` with argmax indicators,
//! `traditional` recomputes the full matrix every episode, and `uniform`
//! never touches the estimate (so distractors stay uniformly distributed).

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use crate::dataset::Dataset;
use crate::episode::{build_confusion_tasks, episode_loss, EpisodeConfig, EpisodeTraceRecord};
use crate::error::{Error, Result};
use crate::estimator::{estimate_step, EstimatorState, ObservationKind};
use crate::evaluate::{evaluate_all_way, traditional_confusion};
use crate::learner::{
    loss_gradient, sgd_step, EmbeddingLearner, LearnerKind, LearnerParams, Optimizer,
    OptimizerKind,
};
use crate::rng::{substream, substream_indexed};

/// How the confusion matrix driving distractor sampling is maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Windowed estimation with soft (probability) observations.
    Confusable,
    /// Windowed estimation with argmax-indicator observations.
    ConfusableCount,
    /// Full traditional confusion computation every episode.
    Traditional,
    /// No confusion tracking; distractors uniform.
    UniformBaseline,
}

pub const MODE_NAMES: [&str; 4] = ["confusable", "confusable-count", "traditional", "uniform"];

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "confusable" => Ok(TrainMode::Confusable),
            "confusable-count" => Ok(TrainMode::ConfusableCount),
            "traditional" => Ok(TrainMode::Traditional),
            "uniform" => Ok(TrainMode::UniformBaseline),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (valid modes: {})",
                MODE_NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrainMode::Confusable => "confusable",
            TrainMode::ConfusableCount => "confusable-count",
            TrainMode::Traditional => "traditional",
            TrainMode::UniformBaseline => "uniform",
        };
        f.write_str(s)
    }
}

/// Everything a training run needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub episodes: usize,
    pub episode: EpisodeConfig,
    pub rho: f64,
    pub n_te: usize,
    pub m_steps: usize,
    pub cme_temperature: f64,
    pub learner: LearnerKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub mode: TrainMode,
    /// Episodes between evaluations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub min_delta: f64,
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    /// Compute mean row L1 between the estimate and a fresh traditional
    /// matrix at every evaluation (costly; for estimator audits).
    pub audit_cme: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Scaled-down defaults: rho 0.9, one estimator step per episode, and
    /// `n_tc` derived from the window size.
    pub fn defaults(n_te: usize, n_d: usize) -> Self {
        TrainConfig {
            episodes: 1000,
            episode: EpisodeConfig {
                n_s: 5,
                n_q: 5,
                n_d,
                n_tc: EpisodeConfig::derived_targets(n_te, n_d),
            },
            rho: 0.9,
            n_te,
            m_steps: 1,
            cme_temperature: 1.0,
            learner: LearnerKind::Prototypical,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            mode: TrainMode::Confusable,
            eval_every: 0,
            eval_episodes: 10,
            patience: 0,
            min_delta: 0.0,
            hidden: vec![64],
            d_emb: 32,
            audit_cme: false,
            seed: 0,
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        self.episode.validate(dataset.k())?;
        // Constructing an estimator validates rho / n_te / m_steps / temperature.
        EstimatorState::new(
            dataset.k(),
            self.rho,
            self.n_te,
            self.m_steps,
            self.cme_temperature,
        )?;
        if self.d_emb == 0 {
            return Err(Error::config("d_emb must be positive"));
        }
        Ok(())
    }
}

/// Metrics of one episode; evaluation columns are filled on eval episodes.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub episode: u64,
    pub mode: TrainMode,
    pub train_j: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub cme_row_l1_error: Option<f64>,
    pub wall_ms_episode: f64,
    pub wall_ms_cme: f64,
}

pub const METRICS_HEADER: &str =
    "episode,mode,train_j,val_accuracy,test_accuracy,cme_row_l1_error,wall_ms_episode,wall_ms_cme";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        fn opt(x: Option<f64>) -> String {
            x.map(|v| format!("{v}")).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{:.3},{:.3}",
            self.episode,
            self.mode,
            self.train_j,
            opt(self.val_accuracy),
            opt(self.test_accuracy),
            opt(self.cme_row_l1_error),
            self.wall_ms_episode,
            self.wall_ms_cme
        )
    }
}

/// Mutable training state carried across episodes.
#[derive(Debug)]
pub struct TrainState {
    pub params: LearnerParams,
    pub optimizer: Optimizer,
    pub estimator: EstimatorState,
    pub episode: u64,
    pub history: Vec<MetricsRow>,
    /// Validation accuracies at evaluation points (drives convergence).
    pub eval_history: Vec<f64>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate(dataset)?;
        let mut init_rng = substream(cfg.seed, "init");
        let params = LearnerParams::init(dataset.d_in(), &cfg.hidden, cfg.d_emb, &mut init_rng);
        let estimator = EstimatorState::new(
            dataset.k(),
            cfg.rho,
            cfg.n_te,
            cfg.m_steps,
            cfg.cme_temperature,
        )?;
        Ok(TrainState {
            params,
            optimizer: Optimizer::new(cfg.optimizer),
            estimator,
            episode: 0,
            history: Vec::new(),
            eval_history: Vec::new(),
        })
    }
}

/// Meta-train split plus optional validation / meta-test splits.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl DataBundle {
    pub fn train_only(train: Dataset) -> Self {
        DataBundle {
            train,
            val: None,
            test: None,
        }
    }
}

/// Output hooks for a run; all optional.
#[derive(Default)]
pub struct TrainSinks {
    pub metrics: Option<Box<dyn Write>>,
    pub trace: Option<Box<dyn Write>>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainSinks {
    pub fn none() -> Self {
        TrainSinks::default()
    }
}

/// What one episode produced (inputs to tracing/metrics).
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub j: f64,
    pub targets: Vec<usize>,
    pub distractors: Vec<Vec<usize>>,
    pub wall_ms_episode: f64,
    pub wall_ms_cme: f64,
}

/// Run one episode: tasks are built from the estimate as it stood at the
/// end of the previous episode, the learner updates on the negative episode
/// objective, and only then does the estimator observe the updated learner.
pub fn run_episode(
    state: &mut TrainState,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<EpisodeOutcome> {
    let t = state.episode;
    let start = Instant::now();
    let mut ep_rng = substream_indexed(cfg.seed, "episode", t);
    let snapshot = state.estimator.snapshot();
    let tasks = build_confusion_tasks(train, &snapshot, &cfg.episode, &mut ep_rng)?;
    let (j, _) = {
        let learner = EmbeddingLearner::new(&state.params, cfg.learner);
        episode_loss(&tasks, &learner, 1.0)?
    };
    if !j.is_finite() {
        return Err(Error::numerical(format!("episode {t}: objective is {j}")));
    }
    let grad = loss_gradient(&state.params, &tasks, cfg.learner, 1.0)
        .map_err(|e| numerical_at(t, e))?;
    sgd_step(&mut state.params, &grad, cfg.lr, &mut state.optimizer);

    let cme_start = Instant::now();
    match cfg.mode {
        TrainMode::Confusable | TrainMode::ConfusableCount => {
            let kind = if cfg.mode == TrainMode::Confusable {
                ObservationKind::Soft
            } else {
                ObservationKind::ArgmaxCount
            };
            let learner = EmbeddingLearner::new(&state.params, cfg.learner);
            for m in 0..cfg.m_steps {
                let mut cme_rng =
                    substream_indexed(cfg.seed, "cme", t * cfg.m_steps as u64 + m as u64);
                estimate_step(
                    train,
                    &learner,
                    &mut state.estimator,
                    cfg.episode.n_s,
                    cfg.episode.n_q,
                    kind,
                    &mut cme_rng,
                )?;
            }
        }
        TrainMode::Traditional => {
            let learner = EmbeddingLearner::new(&state.params, cfg.learner);
            let mut cme_rng = substream_indexed(cfg.seed, "cme", t);
            let full = traditional_confusion(
                train,
                &learner,
                cfg.episode.n_s,
                cfg.episode.n_q,
                cfg.cme_temperature,
                &mut cme_rng,
            )?;
            state.estimator.set_matrix(full)?;
        }
        TrainMode::UniformBaseline => {}
    }
    let wall_ms_cme = cme_start.elapsed().as_secs_f64() * 1e3;
    state.episode += 1;
    Ok(EpisodeOutcome {
        j,
        targets: tasks.iter().map(|t| t.target).collect(),
        distractors: tasks.iter().map(|t| t.distractors.clone()).collect(),
        wall_ms_episode: start.elapsed().as_secs_f64() * 1e3,
        wall_ms_cme,
    })
}

fn numerical_at(episode: u64, e: Error) -> Error {
    match e {
        Error::Numerical(msg) => Error::numerical(format!("episode {episode}: {msg}")),
        other => other,
    }
}

/// True once the metric has not improved by `min_delta` over the last
/// `patience` values; `patience = 0` disables the check.
pub fn convergence_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    if patience == 0 {
        return false;
    }
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for &v in history {
        if v > best + min_delta {
            best = v;
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    since_best >= patience
}

/// Run up to `cfg.episodes` episodes with periodic evaluation, metrics, and
/// checkpoints. Stops early when the validation metric converges.
pub fn run_training(data: &DataBundle, cfg: &TrainConfig, sinks: &mut TrainSinks) -> Result<TrainState> {
    let mut state = TrainState::init(cfg, &data.train)?;
    if let Some(w) = sinks.metrics.as_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    for t in 0..cfg.episodes {
        let outcome = run_episode(&mut state, &data.train, cfg)?;
        if let Some(w) = sinks.trace.as_mut() {
            let record = EpisodeTraceRecord {
                episode: t as u64,
                targets: outcome.targets.clone(),
                distractors: outcome.distractors.clone(),
                j: outcome.j,
            };
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| Error::invalid(format!("trace write failed: {e}")))?;
            writeln!(w)?;
        }

        let eval_due = cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0;
        let mut row = MetricsRow {
            episode: t as u64,
            mode: cfg.mode,
            train_j: outcome.j,
            val_accuracy: None,
            test_accuracy: None,
            cme_row_l1_error: None,
            wall_ms_episode: outcome.wall_ms_episode,
            wall_ms_cme: outcome.wall_ms_cme,
        };
        if eval_due {
            let eval_idx = (t + 1) / cfg.eval_every;
            let learner = EmbeddingLearner::new(&state.params, cfg.learner);
            if let Some(val) = &data.val {
                let seed: u64 = substream_indexed(cfg.seed, "eval-val", eval_idx as u64).random();
                let report = evaluate_all_way(
                    val,
                    &learner,
                    cfg.episode.n_s,
                    cfg.episode.n_q,
                    cfg.eval_episodes,
                    seed,
                )?;
                row.val_accuracy = Some(report.accuracy);
                state.eval_history.push(report.accuracy);
            }
            if let Some(test) = &data.test {
                let seed: u64 = substream_indexed(cfg.seed, "eval-test", eval_idx as u64).random();
                let report = evaluate_all_way(
                    test,
                    &learner,
                    cfg.episode.n_s,
                    cfg.episode.n_q,
                    cfg.eval_episodes,
                    seed,
                )?;
                row.test_accuracy = Some(report.accuracy);
            }
            if cfg.audit_cme {
                let mut audit_rng = substream_indexed(cfg.seed, "audit", eval_idx as u64);
                let full = traditional_confusion(
                    &data.train,
                    &learner,
                    cfg.episode.n_s,
                    cfg.episode.n_q,
                    cfg.cme_temperature,
                    &mut audit_rng,
                )?;
                row.cme_row_l1_error = Some(state.estimator.matrix().mean_row_l1(&full)?);
            }
            if let Some(dir) = &sinks.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                state.params.save(&dir.join(format!("params_{:06}.ckpt", t + 1)))?;
                state
                    .estimator
                    .save(&dir.join(format!("estimator_{:06}.ckpt", t + 1)))?;
            }
        }
        if let Some(w) = sinks.metrics.as_mut() {
            writeln!(w, "{}", row.csv_line())?;
        }
        state.history.push(row);
        state.estimator.check_rows(1e-6).map_err(|e| numerical_at(t as u64, e))?;
        if eval_due && convergence_check(&state.eval_history, cfg.patience, cfg.min_delta) {
            break;
        }
    }
    if let Some(w) = sinks.metrics.as_mut() {
        w.flush()?;
    }
    if let Some(w) = sinks.trace.as_mut() {
        w.flush()?;
    }
    Ok(state)
}
