//! Randomized invariant suites.

mod common;

use confusable_core::{
    apply_update, build_confusion_tasks, count_confusion, distractor_probs, episode_loss,
    normalize_rows, prototypical_probs, sample_distractors, sample_instances, soft_confusion,
    ConfusionMatrix, Dataset, EpisodeConfig, EstimatorState, LearnerParams, MatrixKind,
    PredictiveDistribution, Split, SupportSet, WindowObservation,
};
use ndarray::Array2;
use proptest::prelude::*;

fn normalized(weights: Vec<f64>) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn stochastic_matrix(k: usize, raw: &[f64]) -> Array2<f64> {
    let mut m = Array2::zeros((k, k));
    for i in 0..k {
        let row = normalized(raw[i * k..(i + 1) * k].to_vec());
        for (j, v) in row.into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

fn positive_weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..10.0, n)
}

proptest! {
    #[test]
    fn soft_confusion_rows_always_sum_to_one(
        w in 2usize..6,
        per_class in proptest::collection::vec(1usize..5, 6),
        raw in proptest::collection::vec(0.001f64..10.0, 6 * 5 * 6),
    ) {
        let class_ids: Vec<usize> = (0..w).collect();
        let mut batches = Vec::new();
        let mut cursor = 0;
        for (c, &n) in class_ids.iter().zip(per_class.iter().take(w)) {
            for _ in 0..n {
                let probs = normalized(raw[cursor..cursor + w].to_vec());
                cursor += w;
                batches.push((*c, PredictiveDistribution::new(probs).unwrap()));
            }
        }
        let m = soft_confusion(&batches, &class_ids).unwrap();
        for row in m.as_array().rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn counting_then_normalizing_equals_soft_on_argmax_one_hots(
        w in 2usize..6,
        n_queries in 1usize..50,
        raw in proptest::collection::vec(0.001f64..1.0, 50 * 6),
        trues in proptest::collection::vec(0usize..6, 50),
    ) {
        let class_ids: Vec<usize> = (0..w).collect();
        // Ensure every class has at least one query (soft_confusion's pre).
        let mut trues: Vec<usize> = trues.iter().take(n_queries).map(|t| t % w).collect();
        for c in 0..w {
            trues.push(c);
        }
        let mut batches = Vec::new();
        let mut pairs = Vec::new();
        for (q, &truth) in trues.iter().enumerate() {
            let probs = normalized(raw[q * w..(q + 1) * w].to_vec());
            // One-hot at the argmax, ties toward the lowest index.
            let dist = PredictiveDistribution::new(probs).unwrap();
            let winner = dist.argmax();
            let mut one_hot = vec![0.0; w];
            one_hot[winner] = 1.0;
            batches.push((truth, PredictiveDistribution::new(one_hot).unwrap()));
            pairs.push((truth, winner));
        }
        let via_soft = soft_confusion(&batches, &class_ids).unwrap();
        let via_counts = normalize_rows(&count_confusion(&pairs, w).unwrap());
        for (a, b) in via_soft.as_array().iter().zip(via_counts.as_array().iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn estimator_update_preserves_stochasticity_and_locality(
        k in 2usize..50,
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
        raw_e in proptest::collection::vec(0.001f64..10.0, 50 * 50),
        raw_obs in proptest::collection::vec(0.001f64..10.0, 50 * 50),
        n_te_frac in 0.0f64..1.0,
    ) {
        let n_te = 2 + ((k - 2) as f64 * n_te_frac) as usize;
        let mut state = EstimatorState::new(k, rho, n_te, 1, 1.0).unwrap();
        // Drive E off the uniform start with a synthetic stochastic matrix.
        state.set_matrix(
            ConfusionMatrix::new(MatrixKind::Soft, stochastic_matrix(k, &raw_e)).unwrap(),
        ).unwrap();

        // Random window of size n_te.
        let mut order: Vec<usize> = (0..k).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s as usize) % (i + 1));
        }
        let window: Vec<usize> = order[..n_te].to_vec();
        let obs = WindowObservation::new(
            window.clone(),
            ConfusionMatrix::new(MatrixKind::Soft, stochastic_matrix(n_te, &raw_obs)).unwrap(),
        ).unwrap();

        let before = state.snapshot();
        apply_update(&mut state, &obs).unwrap();

        // Row sums preserved, entries nonnegative.
        for (i, row) in state.matrix().as_array().rows().into_iter().enumerate() {
            let before_sum = before.row(i).sum();
            prop_assert!((row.sum() - before_sum).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        // Locality: anything outside the window block is bit-identical.
        for i in 0..k {
            for j in 0..k {
                if !(window.contains(&i) && window.contains(&j)) {
                    prop_assert_eq!(
                        state.matrix().get(i, j).to_bits(),
                        before.get(i, j).to_bits()
                    );
                }
            }
        }
    }
}

fn tagged(k: usize, n: usize) -> Dataset {
    confusable_core::testbed::tagged_dataset(k, n, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn episode_tasks_satisfy_their_invariants(
        seed in any::<u64>(),
        n_s in 1usize..4,
        n_q in 1usize..4,
        n_d in 1usize..6,
        n_tc in 1usize..8,
    ) {
        let k = 8;
        let ds = tagged(k, 8);
        let cfg = EpisodeConfig { n_s, n_q, n_d, n_tc };
        let mut rng = confusable_core::rng::substream(seed, "prop-episode");
        let c = ConfusionMatrix::uniform(k);
        let tasks = build_confusion_tasks(&ds, &c, &cfg, &mut rng).unwrap();
        prop_assert_eq!(tasks.len(), n_tc);
        let mut targets = std::collections::HashSet::new();
        for t in &tasks {
            t.validate(&cfg).unwrap();
            prop_assert!(targets.insert(t.target), "duplicate target");
            prop_assert_eq!(t.support.way(), n_d + 1);
            prop_assert_eq!(t.support.shots(), n_s);
            prop_assert_eq!(t.query.nrows(), n_q);
        }
    }
}

proptest! {
    #[test]
    fn sample_instances_never_repeats_or_leaks_exclusions(
        seed in any::<u64>(),
        n in 1usize..6,
        exclude in proptest::collection::hash_set(0usize..10, 0..5),
    ) {
        let ds = tagged(3, 10);
        let exclude: Vec<usize> = exclude.into_iter().collect();
        let mut rng = confusable_core::rng::substream(seed, "prop-sample");
        if 10 - exclude.len() < n {
            prop_assert!(sample_instances(&ds, 0, n, &mut rng, &exclude).is_err());
        } else {
            let picks = sample_instances(&ds, 0, n, &mut rng, &exclude).unwrap();
            let unique: std::collections::HashSet<_> = picks.iter().collect();
            prop_assert_eq!(unique.len(), picks.len());
            prop_assert!(picks.iter().all(|i| !exclude.contains(i)));
        }
    }

    #[test]
    fn distractor_draws_are_distinct_and_within_range(
        seed in any::<u64>(),
        weights in proptest::collection::vec(0.0f64..5.0, 3..12),
        n_frac in 0.0f64..1.0,
    ) {
        let n_d = 1 + ((weights.len() - 1) as f64 * n_frac) as usize;
        let mut rng = confusable_core::rng::substream(seed, "prop-distract");
        let picks = sample_distractors(&weights, n_d, &mut rng).unwrap();
        prop_assert_eq!(picks.len(), n_d);
        let unique: std::collections::HashSet<_> = picks.iter().collect();
        prop_assert_eq!(unique.len(), n_d);
        prop_assert!(picks.iter().all(|&p| p < weights.len()));
    }

    #[test]
    fn episode_objective_is_order_invariant(
        seed in any::<u64>(),
        perm_seed in any::<u64>(),
    ) {
        let k = 8;
        let ds = tagged(k, 10);
        let cfg = EpisodeConfig { n_s: 2, n_q: 3, n_d: 2, n_tc: 4 };
        let mut rng = confusable_core::rng::substream(seed, "prop-loss");
        let c = ConfusionMatrix::uniform(k);
        let tasks = build_confusion_tasks(&ds, &c, &cfg, &mut rng).unwrap();
        let learner = confusable_core::testbed::FrozenTableLearner::uniform(k);
        let (j, _) = episode_loss(&tasks, &learner, 1.0).unwrap();

        // Permute task order and query order within each task.
        let mut permuted = tasks.clone();
        let mut s = perm_seed;
        let mut shuffle = |n: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                idx.swap(i, (s as usize) % (i + 1));
            }
            idx
        };
        let task_order = shuffle(permuted.len());
        let mut reordered: Vec<_> = task_order.iter().map(|&i| permuted[i].clone()).collect();
        for t in &mut reordered {
            let order = shuffle(t.query.nrows());
            let rows: Vec<Vec<f64>> = order.iter().map(|&r| t.query.row(r).to_vec()).collect();
            t.query = common::rows_to_matrix(&rows);
            t.query_indices = order.iter().map(|&r| t.query_indices[r]).collect();
        }
        permuted = reordered;
        let (j2, _) = episode_loss(&permuted, &learner, 1.0).unwrap();
        prop_assert!((j - j2).abs() <= 1e-12, "{j} vs {j2}");
    }

    #[test]
    fn prototypical_is_invariant_to_support_permutations(
        seed in any::<u64>(),
        perm_seed in any::<u64>(),
    ) {
        let mut rng = confusable_core::rng::substream(seed, "prop-proto");
        let params = LearnerParams::init(4, &[5], 3, &mut rng);
        use rand::Rng;
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = vecs(3);
        let b = vecs(3);
        let c = vecs(3);
        let query_vec: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let query = ndarray::Array1::from_vec(query_vec);

        let support = SupportSet::new(
            vec![0, 1, 2],
            vec![
                common::rows_to_matrix(&a),
                common::rows_to_matrix(&b),
                common::rows_to_matrix(&c),
            ],
        ).unwrap();
        let base = prototypical_probs(&params, &support, query.view(), 1.0).unwrap();

        // Permute instances within class 0.
        let mut s = perm_seed;
        let mut order: Vec<usize> = (0..3).collect();
        for i in (1..3).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s as usize) % (i + 1));
        }
        let a_perm: Vec<Vec<f64>> = order.iter().map(|&i| a[i].clone()).collect();
        let support_perm = SupportSet::new(
            vec![0, 1, 2],
            vec![
                common::rows_to_matrix(&a_perm),
                common::rows_to_matrix(&b),
                common::rows_to_matrix(&c),
            ],
        ).unwrap();
        let shuffled = prototypical_probs(&params, &support_perm, query.view(), 1.0).unwrap();
        for (x, y) in base.probs().iter().zip(shuffled.probs().iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }

        // Swap class order: probabilities follow their classes.
        let support_swapped = SupportSet::new(
            vec![2, 1, 0],
            vec![
                common::rows_to_matrix(&c),
                common::rows_to_matrix(&b),
                common::rows_to_matrix(&a),
            ],
        ).unwrap();
        let swapped = prototypical_probs(&params, &support_swapped, query.view(), 1.0).unwrap();
        prop_assert!((base.probs()[0] - swapped.probs()[2]).abs() <= 1e-12);
        prop_assert!((base.probs()[1] - swapped.probs()[1]).abs() <= 1e-12);
        prop_assert!((base.probs()[2] - swapped.probs()[0]).abs() <= 1e-12);
    }
}

/// With a uniform confusion matrix the distractor marginal is uniform over
/// non-target classes: the confusion-guided sampler degenerates to plain
/// uniform episodic sampling.
#[test]
fn uniform_matrix_degenerates_to_uniform_episodic_sampling() {
    let k = 10;
    let ds = tagged(k, 8);
    let cfg = EpisodeConfig {
        n_s: 2,
        n_q: 2,
        n_d: 1,
        n_tc: 5,
    };
    let c = ConfusionMatrix::uniform(k);
    let mut rng = confusable_core::rng::substream(400, "uniform-marginal");
    let mut counts = vec![0u64; k];
    let episodes = 4000;
    for _ in 0..episodes {
        for task in build_confusion_tasks(&ds, &c, &cfg, &mut rng).unwrap() {
            counts[task.distractors[0]] += 1;
        }
    }
    // Marginal over distractors is uniform over all classes by symmetry
    // (each class is excluded as target equally often).
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    // 99% critical value for 9 degrees of freedom.
    assert!(stat < 21.666, "chi-square statistic {stat}");
}

/// normalize_rows on a matrix with an all-zero row yields the uniform row,
/// and distractor_probs stays well-defined there.
#[test]
fn zero_rows_flow_through_to_well_defined_sampling() {
    let counts = count_confusion(&[(1, 0), (1, 1)], 3).unwrap();
    let normalized = normalize_rows(&counts);
    assert_eq!(normalized.row(0).to_vec(), vec![1.0 / 3.0; 3]);
    let probs = distractor_probs(&normalized, 0).unwrap();
    assert_eq!(probs, vec![0.5, 0.5]);
}

/// Dataset construction sanity for the tagged fixture used above.
#[test]
fn tagged_dataset_has_dense_classes() {
    let ds = tagged(5, 7);
    assert_eq!(ds.k(), 5);
    assert_eq!(ds.split(), Split::MetaTrain);
    for c in 0..5 {
        assert_eq!(ds.class_len(c), 7);
        assert_eq!(ds.instance(c, 0)[0], c as f64);
    }
}
