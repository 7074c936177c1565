use proptest::prelude::*;

use partial_gdro::ablation::{confusion, flip_to_confusion, largest_remainder, rounded_target};
use partial_gdro::dataset::{self, generate_splits, sample_group_budget, SpuriousTask, Split, Task};
use partial_gdro::loss::{self, LossConfig};
use partial_gdro::model::{self, Arch, ModelParams};
use partial_gdro::optim::{GroupWeights, TrainConfig};
use partial_gdro::pipeline::{self, Stage1Config};
use partial_gdro::rng;
use partial_gdro::theory::{coupling_check, perturb_check, FiniteJoint};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
        let e: Vec<f64> = v.iter().map(|x| -(1.0 - x).ln() + 1e-12).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    })
}

fn prob_and_target() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..=10).prop_flat_map(|k| (simplex(k), 0..k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn losses_are_bounded((p, y) in prob_and_target(), bound in 2.5f64..40.0) {
        let ce = LossConfig::truncated_ce(bound);
        let v = loss::loss_value(&ce, &p, y);
        prop_assert!((0.0..=bound).contains(&v));
        let sq = loss::loss_value(&LossConfig::squared(), &p, y);
        prop_assert!((0.0..=2.0).contains(&sq));
    }

    #[test]
    fn two_way_bound_dominates_the_error_indicator((p, y) in prob_and_target()) {
        let wrong = f64::from(u8::from(model::argmax(&p) != y));
        for cfg in [LossConfig::default(), LossConfig::squared()] {
            let l = loss::loss_value(&cfg, &p, y);
            prop_assert!(loss::two_way_error_bound(&cfg, l) >= wrong - 1e-12);
        }
    }

    #[test]
    fn class_count_bound_holds_for_two_classes(p in simplex(2), y in 0usize..2) {
        let wrong = f64::from(u8::from(model::argmax(&p) != y));
        for cfg in [LossConfig::default(), LossConfig::squared()] {
            let l = loss::loss_value(&cfg, &p, y);
            prop_assert!(loss::error_upper_bound(&cfg, l, 2).unwrap() >= wrong - 1e-12);
        }
    }

    #[test]
    fn squared_loss_is_lipschitz_on_the_simplex(a in simplex(4), b in simplex(4), y in 0usize..4) {
        let cfg = LossConfig::squared();
        let d = loss::loss_value(&cfg, &a, y) - loss::loss_value(&cfg, &b, y);
        let dist: f64 = a.iter().zip(&b).map(|(x, z)| (x - z) * (x - z)).sum::<f64>().sqrt();
        prop_assert!(d.abs() <= 2.0 * std::f64::consts::SQRT_2 * dist + 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences(
        seed in any::<u64>(),
        d in 1usize..4,
        k in 2usize..4,
        hidden in 0usize..4,
        batch in 1usize..5,
        squared in any::<bool>(),
    ) {
        let arch = if hidden == 0 { Arch::Linear } else { Arch::Mlp1 { hidden } };
        let mut r = rng::stream(seed, 0);
        let params = ModelParams::init(arch, d, k, &mut r);
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|i| (0..d).map(|j| ((seed.wrapping_add((i * d + j) as u64) % 200) as f64 / 100.0) - 1.0).collect())
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let targets: Vec<usize> = (0..batch).map(|i| (i + seed as usize) % k).collect();
        let weights: Vec<f64> = (0..batch).map(|i| 0.5 + i as f64 / batch as f64).collect();
        let loss = if squared { LossConfig::squared() } else { LossConfig::default() };
        let a = model::grad(&params, &refs, &targets, &weights, &loss, None).unwrap();
        let n = model::numerical_grad(&params, &refs, &targets, &weights, &loss, None, 1e-5).unwrap();
        prop_assert!(model::relative_error(&a, &n) < 1e-5);
    }

    #[test]
    fn exponentiated_update_stays_on_simplex_and_ignores_shifts(
        losses in prop::collection::vec(0.0f64..5.0, 2..8),
        shift in -100.0f64..100.0,
        eta in 0.0f64..2.0,
    ) {
        let g = losses.len();
        let mut a = GroupWeights::uniform(g);
        let mut b = GroupWeights::uniform(g);
        for _ in 0..5 {
            a.exponentiated_update(&losses, eta);
            let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
            b.exponentiated_update(&shifted, eta);
        }
        prop_assert!(a.on_simplex(1e-9));
        for (x, y) in a.w.iter().zip(&b.w) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn largest_remainder_preserves_totals(p in simplex(5), total in 0usize..500) {
        let c = largest_remainder(&p, total);
        prop_assert_eq!(c.iter().sum::<usize>(), total);
        for (count, q) in c.iter().zip(&p) {
            prop_assert!((*count as f64 - q * total as f64).abs() < 1.0);
        }
    }

    #[test]
    fn flipping_realises_the_rounded_confusion(
        truth in prop::collection::vec(0usize..3, 1..300),
        rows in prop::collection::vec(simplex(3), 3),
        seed in any::<u64>(),
    ) {
        let flipped = flip_to_confusion(&truth, &rows, seed).unwrap();
        let realised = confusion(&flipped, &truth, 3).unwrap();
        prop_assert_eq!(realised, rounded_target(&truth, &rows).unwrap());
    }

    #[test]
    fn identity_confusion_round_trips(truth in prop::collection::vec(0usize..4, 1..200), seed in any::<u64>()) {
        let m = confusion(&truth, &truth, 4).unwrap();
        let back = flip_to_confusion(&truth, &m.row_normalized(), seed).unwrap();
        prop_assert_eq!(back, truth);
    }

    #[test]
    fn unperturbed_objectives_have_zero_gap(seed in any::<u64>(), groups in 1usize..4, grid in 2usize..10) {
        let rec = perturb_check(50, groups, grid, 0.0, seed).unwrap();
        prop_assert_eq!(rec.max_gap, 0.0);
        prop_assert_eq!(rec.violations, 0);
    }

    #[test]
    fn matched_kernel_preserves_group_losses(seed in any::<u64>(), nx in 1usize..5, ny in 1usize..4, nz in 1usize..4) {
        let mut r = rng::stream(seed, 0);
        let joint = FiniteJoint::random(&mut r, nx, ny, nz);
        let loss: Vec<f64> = (0..nx * ny).map(|c| (c as f64 * 0.37).sin().abs() * 3.0).collect();
        prop_assert!(coupling_check(&joint, &loss, None).unwrap().max_abs_diff < 1e-12);
    }

    #[test]
    fn conditioning_masks_out_of_class_groups(seed in any::<u64>(), y in 0usize..2) {
        let mut r = rng::stream(seed, 1);
        let params = ModelParams::init(Arch::mlp1(), 3, 4, &mut r);
        let cond = model::fit_conditioning(&[0, 0, 1, 1], &[0, 1, 2, 3], &[0, 0, 1, 1], 2).unwrap();
        let p = model::forward(&params, &[0.3, -1.0, 2.0], Some((&cond, y))).unwrap();
        for g in 0..4 {
            prop_assert_eq!(p[g] == 0.0, !cond.is_allowed(y, g));
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dataset_text_round_trip_is_bitwise() {
    let ds = Task::Spurious(SpuriousTask::default()).generate(300, 4).unwrap();
    let mut buf = Vec::new();
    dataset::write_dataset(&mut buf, &ds).unwrap();
    let back = dataset::read_dataset(buf.as_slice(), Split::Train).unwrap();
    assert_eq!(back.features.len(), ds.features.len());
    assert!(back.features.iter().zip(&ds.features).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.class_labels, ds.class_labels);
    assert_eq!(back.group_labels, ds.group_labels);
}

/// Methods given a budget mask must not read group labels outside it.
#[test]
fn masked_group_labels_are_never_read() {
    let task = Task::Spurious(SpuriousTask::default());
    let s = generate_splits(&task, 600, 300, 10, 3).unwrap();
    let mask = sample_group_budget(&s.train, &s.val, 8, 3).unwrap();
    let (mut train_p, mut val_p) = (s.train.clone(), s.val.clone());
    for &i in &mask.unlabeled_train_idx {
        train_p.group_labels[i] = (train_p.group_labels[i] + 1) % 4;
    }
    for i in 0..val_p.len() {
        if mask.labeled_val_idx.binary_search(&i).is_err() {
            val_p.group_labels[i] = (val_p.group_labels[i] + 3) % 4;
        }
    }
    let cfg = TrainConfig {
        epochs: 3,
        eval_every: 5,
        seed: 11,
        ..TrainConfig::default()
    };
    let loss = LossConfig::default();
    let arch = Arch::mlp1();
    assert_eq!(
        pipeline::subset_gdro(&s.train, &s.val, &mask, &cfg, arch, &loss).unwrap(),
        pipeline::subset_gdro(&train_p, &val_p, &mask, &cfg, arch, &loss).unwrap()
    );
    assert_eq!(
        pipeline::erm_run(&s.train, &s.val, &mask, &cfg, arch, &loss).unwrap(),
        pipeline::erm_run(&train_p, &val_p, &mask, &cfg, arch, &loss).unwrap()
    );
    let bc = pipeline::BarackConfig {
        stage1: Stage1Config {
            train: TrainConfig {
                epochs: 3,
                eval_every: 5,
                seed: 12,
                ..TrainConfig::default()
            },
            epoch_scale: None,
            ..Stage1Config::default()
        },
        stage2: cfg.clone(),
        ..pipeline::BarackConfig::default()
    };
    let clean = pipeline::barack_run(&s.train, &s.val, &mask, &bc, &loss).unwrap();
    let dirty = pipeline::barack_run(&train_p, &val_p, &mask, &bc, &loss).unwrap();
    assert_eq!(clean.stage1, dirty.stage1);
    assert_eq!(clean.pseudo, dirty.pseudo);
    assert_eq!(clean.stage2, dirty.stage2);
}
