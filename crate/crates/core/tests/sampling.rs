use ndarray::Array4;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rano_core::cohort::{ModalitySet, RanoLabel, StudySample, TimepointRecord};
use rano_core::sampling::{
    augment, class_loss_weights_from_counts, compute_class_loss_weights, compute_sample_weights,
    make_folds, weighted_draw, AugmentationPolicy,
};
use rano_core::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const PREV: [f64; 4] = [0.67, 0.20, 0.06, 0.07];

fn samples(counts: [usize; 4]) -> Vec<StudySample> {
    let mut out = vec![];
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let label = RanoLabel::TRAINABLE[c];
            let tp = |week, label| TimepointRecord {
                patient_id: format!("P{c}-{i}"),
                week,
                session: format!("week-{week:03}"),
                label,
                available: ModalitySet::all(),
                image_paths: Default::default(),
            };
            out.push(StudySample {
                patient_id: format!("P{c}-{i}"),
                prev: tp(20, RanoLabel::SD),
                curr: tp(30, label),
                modalities: ModalitySet::all(),
                label,
            });
        }
    }
    out
}

#[test]
fn sample_weights_are_one_minus_prevalence() {
    let w = compute_sample_weights(&samples([1, 1, 1, 1]), PREV)
        .unwrap()
        .values();
    for (a, b) in w.iter().zip([0.33, 0.80, 0.94, 0.93]) {
        assert!((a - b).abs() < 1e-12, "{w:?}");
    }
    assert!(compute_sample_weights(&samples([3, 0, 0, 0]), [1.0, 0.0, 0.0, 0.0]).is_err());
    assert!(compute_sample_weights(&samples([1, 0, 0, 0]), [0.5, 0.2, 0.2, 0.2]).is_err());
}

#[test]
fn weighted_draws_pass_chi_square() {
    let s = samples([67, 20, 6, 7]);
    let w = compute_sample_weights(&s, PREV).unwrap().values();
    let n = 100_000;
    let draws = weighted_draw(&w, n, 17).unwrap();
    let mut observed = [0.0f64; 4];
    for i in draws {
        observed[s[i].class_index()] += 1.0;
    }
    let total: f64 = w.iter().sum();
    let mut expected = [0.0f64; 4];
    for (sample, wi) in s.iter().zip(&w) {
        expected[sample.class_index()] += wi / total * n as f64;
    }
    let chi: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi);
    assert!(
        p > 0.01,
        "chi2 {chi} p {p} observed {observed:?} expected {expected:?}"
    );
    assert!(weighted_draw(&[0.0, 0.0], 5, 1).is_err());
    assert!(weighted_draw(&[1.0], 0, 1).is_err());
}

#[test]
fn folds_of_a_hundred() {
    let s = samples([67, 20, 6, 7]);
    let plan = make_folds(&s, 5, 3, false).unwrap();
    assert!(plan
        .per_fold_class_counts
        .iter()
        .all(|r| r[0] == 13 || r[0] == 14));
    assert_eq!(plan, make_folds(&s, 5, 3, false).unwrap());
    let mut seen = vec![0; 5];
    for f in 0..5 {
        let (train, test) = plan.split(&s, f).unwrap();
        assert_eq!(train.len() + test.len(), 100);
        seen[f] = test.len();
        assert!(test.iter().all(|i| !train.contains(i)));
    }
    assert_eq!(seen.iter().sum::<usize>(), 100);
    assert!(seen.iter().all(|&n| n == 20), "{seen:?}");
    assert!(make_folds(&s, 1, 0, false).is_err());
}

#[test]
fn grouped_folds_keep_patients_together() {
    let mut s = samples([10, 6, 4, 4]);
    for (i, x) in s.iter_mut().enumerate() {
        x.patient_id = format!("G{}", i % 7);
        x.curr.week = 30 + i as i64;
    }
    let plan = make_folds(&s, 3, 5, true).unwrap();
    for a in &s {
        for b in &s {
            if a.patient_id == b.patient_id {
                assert_eq!(plan.assignments[&a.id()], plan.assignments[&b.id()]);
            }
        }
    }
}

#[test]
fn loss_weights_are_inverse_prevalence() {
    let w = compute_class_loss_weights(PREV).unwrap();
    for (a, b) in w.iter().zip([1.4925, 5.0, 16.667, 14.286]) {
        assert!((a - b).abs() < 1e-3, "{w:?}");
    }
    for (wi, p) in w.iter().zip(PREV) {
        assert!((wi * p - 1.0).abs() < 1e-12);
    }
    assert!(compute_class_loss_weights([0.7, 0.3, 0.0, 0.0]).is_err());
    let smoothed = class_loss_weights_from_counts(&[6, 4, 0, 0]);
    assert_eq!(smoothed, [2.0, 14.0 / 5.0, 14.0, 14.0]);
}

proptest! {
    #[test]
    fn stratification_is_within_one(counts in prop::array::uniform4(0usize..30), k in 2usize..7, seed in any::<u64>()) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let s = samples(counts);
        let plan = make_folds(&s, k, seed, false).unwrap();
        prop_assert_eq!(plan.assignments.len(), s.len());
        for c in 0..4 {
            let col: Vec<usize> = plan.per_fold_class_counts.iter().map(|r| r[c]).collect();
            prop_assert!(col.iter().max().unwrap() - col.iter().min().unwrap() <= 1);
        }
        let sizes: Vec<usize> = plan.per_fold_class_counts.iter().map(|r| r.iter().sum()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn disabled_augmentation_is_identity(seed in any::<u64>()) {
        let x = Array4::from_shape_fn((2, 3, 4, 5), |(c, a, b, d)| (c * 60 + a * 20 + b * 5 + d) as f32);
        let mut y = x.clone();
        let d = augment(&mut y, &AugmentationPolicy::none(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(y, x);
        prop_assert_eq!(d.flips, [false; 3]);
    }
}

#[test]
fn augmentation_replays_from_seed() {
    let x = Array4::from_shape_fn((2, 6, 6, 6), |(c, a, b, d)| (c + a * b + d) as f32 * 0.1);
    let p = AugmentationPolicy::default();
    let run = |seed| {
        let mut y = x.clone();
        let d = augment(&mut y, &p, &mut ChaCha8Rng::seed_from_u64(seed));
        (y, d)
    };
    assert_eq!(run(4), run(4));
    let flips_only = AugmentationPolicy {
        flip_prob_per_axis: 1.0,
        ..AugmentationPolicy::none()
    };
    let mut y = x.clone();
    augment(&mut y, &flips_only, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(y[[1, 0, 0, 0]], x[[1, 5, 5, 5]]);
    let bad = AugmentationPolicy {
        gamma_range: (1.5, 0.7),
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
