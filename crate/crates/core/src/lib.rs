//! Confusion-guided episodic meta-learning for large-class few-shot
//! classification.
//!
//! The training loop keeps a running row-stochastic estimate of the
//! learner's K x K confusion matrix, refreshed cheaply from small windowed
//! observations, and biases episode construction toward the classes the
//! learner currently confuses: each uniformly drawn target class is paired
//! with distractor classes sampled from the target's confusion row. Two
//! metric-based learners (prototype distances and attention matching) run
//! on top of a small MLP embedding with hand-written gradients.

pub mod config;
pub mod confusion;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod estimator;
pub mod evaluate;
pub mod learner;
pub mod rng;
pub mod testbed;
pub mod training;

pub use config::Config;
pub use confusion::{
    count_confusion, normalize_rows, soft_confusion, ConfusionMatrix, MatrixKind,
    PredictiveDistribution,
};
pub use dataset::{
    generate_synthetic, generate_synthetic_detailed, ingest_image_folders, partition_by_class,
    sample_instances, Dataset, Split, SyntheticDataset, SyntheticSpec,
};
pub use episode::{
    build_confusion_tasks, distractor_probs, episode_loss, non_target_classes,
    sample_distractors, EpisodeConfig, EpisodeTask, EpisodeTraceRecord,
};
pub use error::{Error, Result};
pub use estimator::{
    apply_update, estimate_step, observe_window, EstimatorState, ObservationKind,
    WindowObservation,
};
pub use evaluate::{
    attention_frequencies, attention_frequencies_str, cme_benchmark, cost_table_csv,
    evaluate_all_way, traditional_confusion, CostRow, EvalReport,
};
pub use learner::{
    loss_gradient, matching_probs, prototypical_probs, sgd_step, EmbeddingLearner, Gradient,
    LayerTensors, LearnerKind, LearnerParams, MetaLearner, Optimizer, OptimizerKind, SupportSet,
};
pub use training::{
    convergence_check, run_episode, run_training, DataBundle, MetricsRow, TrainConfig, TrainMode,
    TrainSinks, TrainState, METRICS_HEADER, MODE_NAMES,
};
