use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedfnn::datakit::{dirichlet_partition, inject_noise_with_rows, kfold_indices, largest_remainder, PartitionSpec};
use fedfnn::federation::{mean_loss_increment, mean_loss_increment_telescoped, update_statuses};
use fedfnn::fnn::{predict, ActivationMatrix, LabeledDataset, RuleBank};
use fedfnn::grad::batch_backward;
use fedfnn::trainer::batch_iterator;

fn labelled(n: usize, classes: usize) -> LabeledDataset {
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
    let features: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.37).sin()).collect();
    LabeledDataset::new(features, labels, 2, classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_are_distributions(
        seed in any::<u64>(),
        d in 1usize..6,
        k in 1usize..6,
        c in 2usize..5,
        mask in prop::collection::vec(any::<bool>(), 6),
        x in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let bank = RuleBank::random(d, c, k, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut active = mask[..k].to_vec();
        active[0] = true;
        let p = predict(&x[..d], &bank, &active).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn largest_remainder_is_exact_and_close(
        total in 0usize..5000,
        weights in prop::collection::vec(0.0f64..1.0, 1..8),
    ) {
        let sum: f64 = weights.iter().sum();
        prop_assume!(sum > 1e-6);
        let props: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let counts = largest_remainder(total, &props);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (n, p) in counts.iter().zip(&props) {
            prop_assert!((*n as f64 - p * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn kfold_covers_each_index_once(len in 2usize..400, folds in 2usize..8, seed in any::<u64>()) {
        prop_assume!(folds <= len);
        let parts = kfold_indices(len, folds, seed).unwrap();
        prop_assert_eq!(parts.len(), folds);
        let mut seen = vec![0u8; len];
        for part in &parts {
            part.iter().for_each(|&i| seen[i] += 1);
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn noise_touches_the_pinned_row_count(n in 1usize..300, level in 0.0f64..=1.0, seed in any::<u64>()) {
        let data = labelled(n, 3);
        let (noisy, rows) = inject_noise_with_rows(&data, level, seed).unwrap();
        prop_assert_eq!(rows.len(), (level * n as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(noisy.labels(), data.labels());
        for i in 0..n {
            let changed = noisy.sample(i) != data.sample(i);
            prop_assert_eq!(changed, rows.contains(&i));
        }
    }

    #[test]
    fn dirichlet_partition_conserves_samples(
        n in 30usize..400,
        clients in 2usize..7,
        alpha in 0.05f64..50.0,
        seed in any::<u64>(),
    ) {
        let data = labelled(n, 4);
        let (parts, _) = dirichlet_partition(&data, &PartitionSpec { alpha, clients, seed }).unwrap();
        prop_assert_eq!(parts.len(), clients);
        prop_assert_eq!(parts.iter().map(LabeledDataset::len).sum::<usize>(), n);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        let mut totals = vec![0usize; 4];
        for p in &parts {
            for (t, c) in totals.iter_mut().zip(p.class_counts()) {
                *t += c;
            }
        }
        prop_assert_eq!(totals, data.class_counts());
    }

    #[test]
    fn batches_partition_the_epoch(len in 1usize..500, batch in 1usize..80, seed in any::<u64>()) {
        let batches = batch_iterator(len, batch, seed);
        prop_assert_eq!(batches.len(), len.div_ceil(batch));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= batch && !b.is_empty()));
    }

    #[test]
    fn telescoping_holds_for_any_history(
        history in prop::collection::vec(0.0f64..10.0, 2..40),
        window in 1usize..12,
    ) {
        let literal = mean_loss_increment(&history, window);
        let telescoped = mean_loss_increment_telescoped(&history, window);
        prop_assert_eq!(literal.is_some(), history.len() > window);
        if let (Some(a), Some(b)) = (literal, telescoped) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn statuses_follow_a_strict_threshold(pi in prop::collection::vec(0.0f64..1.0, 1..10), t in 0.0f64..1.0) {
        let s = update_statuses(&pi, t);
        for (bit, p) in s.iter().zip(&pi) {
            prop_assert_eq!(*bit, *p > t);
        }
    }

    #[test]
    fn column_edits_keep_rows_consistent(
        rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 1..6),
        keep in prop::collection::vec(any::<bool>(), 5),
    ) {
        let mut m = ActivationMatrix::from_rows(rows.clone()).unwrap();
        m.retain_columns(&keep);
        let expected: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| r.iter().zip(&keep).filter(|(_, &k)| k).map(|(&b, _)| b).collect())
            .collect();
        let got: Vec<Vec<bool>> = m.rows().map(<[bool]>::to_vec).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn batch_gradient_is_invariant_to_sample_order(seed in any::<u64>(), n in 1usize..12) {
        let data = labelled(n, 3);
        let bank = RuleBank::random(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let active = [true, false, true];
        let forward: Vec<(&[f64], usize)> = data.iter().collect();
        let reversed: Vec<(&[f64], usize)> = forward.iter().rev().copied().collect();
        let (la, ga) = batch_backward(forward, &bank, &active).unwrap();
        let (lb, gb) = batch_backward(reversed, &bank, &active).unwrap();
        prop_assert!((la - lb).abs() < 1e-12);
        prop_assert!(ga.max_relative_error(&gb) < 1e-9);
    }
}
