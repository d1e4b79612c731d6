//! Property tests against independent oracles: schedule shape, AUROC by pair
//! counting, bootstrap containment, diagonal Fréchet distances, optimizer
//! laws, label resolution and patient splits.

mod common;

use common::brute_auroc;
use proptest::prelude::*;
use synthsupp::eval::{auroc, bootstrap_ci, frechet_distance, FeatureStats};
use synthsupp::optim::{ema_update, lion_update, LionConfig};
use synthsupp::schedule::{make_schedule, ScheduleKind};
use synthsupp::toydata::*;

use nalgebra::{DMatrix, DVector};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        // Coarse scores so ties are common.
        (prop::collection::vec(0u8..8, n), prop::collection::vec(any::<bool>(), n))
            .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 8.0).collect(), l))
            .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_equals_pair_counting((scores, labels) in scored()) {
        let a = auroc(&scores, &labels, &vec![true; scores.len()]).unwrap();
        prop_assert!((a - brute_auroc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn masked_auroc_is_auroc_of_the_subset((scores, labels) in scored(), mask_bits in prop::collection::vec(any::<bool>(), 40)) {
        let mask: Vec<bool> = (0..scores.len()).map(|i| mask_bits[i] || i < 2).collect();
        let kept: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
        let s: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = kept.iter().map(|&i| labels[i]).collect();
        let r = auroc(&scores, &labels, &mask);
        if l.iter().any(|&b| b) && l.iter().any(|&b| !b) {
            prop_assert!((r.unwrap() - brute_auroc(&s, &l)).abs() < 1e-12);
        } else {
            prop_assert!(r.is_err());
        }
    }

    #[test]
    fn cosine_schedule_is_monotone(steps in 2usize..2000) {
        let s = make_schedule(ScheduleKind::Cosine, steps).unwrap();
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn diagonal_frechet_matches_closed_form(
        m1 in prop::collection::vec(-3.0f64..3.0, 1..6),
        seed in prop::collection::vec((-3.0f64..3.0, 0.01f64..4.0, 0.01f64..4.0), 6),
    ) {
        let d = m1.len();
        let m2: Vec<f64> = (0..d).map(|i| seed[i].0).collect();
        let v1: Vec<f64> = (0..d).map(|i| seed[i].1).collect();
        let v2: Vec<f64> = (0..d).map(|i| seed[i].2).collect();
        let stats = |m: &[f64], v: &[f64]| {
            FeatureStats::new(DVector::from_column_slice(m), DMatrix::from_diagonal(&DVector::from_column_slice(v)), 10).unwrap()
        };
        let expected: f64 = (0..d).map(|i| (m1[i] - m2[i]).powi(2) + v1[i] + v2[i] - 2.0 * (v1[i] * v2[i]).sqrt()).sum();
        let got = frechet_distance(&stats(&m1, &v1), &stats(&m2, &v2)).unwrap();
        prop_assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
        prop_assert!(frechet_distance(&stats(&m1, &v1), &stats(&m1, &v1)).unwrap().abs() < 1e-8);
    }

    #[test]
    fn lion_from_rest_moves_each_weight_by_lr(
        theta in prop::collection::vec(-2.0f64..2.0, 1..20),
        g in prop::collection::vec(-1.0f64..1.0, 20),
        lr in 1e-5f64..1e-1,
    ) {
        let g = &g[..theta.len()];
        let mut p = theta.clone();
        let mut m = vec![0.0; theta.len()];
        lion_update(&mut p, g, &mut m, &LionConfig::new(lr, 0.0)).unwrap();
        for i in 0..theta.len() {
            let step = theta[i] - p[i];
            let expect = if g[i] > 0.0 { lr } else if g[i] < 0.0 { -lr } else { 0.0 };
            prop_assert!((step - expect).abs() < 1e-12);
            prop_assert!((m[i] - 0.01 * g[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_converges_geometrically(start in -5.0f64..5.0, target in -5.0f64..5.0, decay in 0.5f64..0.999, n in 1usize..300) {
        let mut e = vec![start];
        for _ in 0..n {
            ema_update(&mut e, &[target], decay).unwrap();
        }
        let closed = target + decay.powi(n as i32) * (start - target);
        prop_assert!((e[0] - closed).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_interval_brackets_point((scores, labels) in scored(), seed in any::<u64>()) {
        let mask = vec![true; scores.len()];
        let ci = bootstrap_ci(&scores, &labels, &mask, 200, seed).unwrap();
        prop_assert!(ci.lower <= ci.upper);
        prop_assert!((ci.point - auroc(&scores, &labels, &mask).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn patient_splits_partition(n in 20usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let (fa, fb) = (a * 0.999, (1.0 - a * 0.999) * b);
        let fracs = (fa, fb, 1.0 - fa - fb);
        let spec = SiteSpec::site_a().with_image_count(n);
        let spec = SiteSpec { image_size: 8, ..spec };
        let data = generate_site(&spec, 1).unwrap();
        let s = split_by_patient(&data, fracs, seed).unwrap();
        let parts = [&s.train, &s.val, &s.test];
        prop_assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), data.len());
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(parts[i].patient_ids().is_disjoint(&parts[j].patient_ids()));
            }
        }
        let mut ids: Vec<u64> = parts.iter().flat_map(|p| p.records.iter().map(|r| r.id)).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..data.len() as u64).collect::<Vec<_>>());
    }
}

#[test]
fn bootstrap_contains_point_in_nearly_all_trials() {
    use rand::{RngExt, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let trials = 500;
    let mut inside = 0;
    for t in 0..trials {
        let n = rng.random_range(20..80);
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random_bool(0.3)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.3 } else { 0.0 }).collect();
        let ci = bootstrap_ci(&scores, &labels, &vec![true; n], 200, t).unwrap();
        if ci.lower <= ci.point && ci.point <= ci.upper {
            inside += 1;
        }
    }
    assert!(inside as f64 >= 0.99 * trials as f64, "{inside}/{trials}");
}

const STATES: [LabelState; 4] = [LabelState::Present, LabelState::Absent, LabelState::NotMentioned, LabelState::Uncertain];

/// Every combination of states on four label slots, the other slots filled
/// with each state in turn.
#[test]
fn label_resolution_exhaustive() {
    let slots = [0usize, 5, 9, 13];
    for fill in STATES {
        for code in 0..256usize {
            let mut s = [fill; N_LABELS];
            for (k, &slot) in slots.iter().enumerate() {
                s[slot] = STATES[(code >> (2 * k)) & 3];
            }
            let any_uncertain = s.contains(&LabelState::Uncertain);
            let tr = resolve_labels(&s, LabelMode::Training);
            assert_eq!(tr.keep, !any_uncertain);
            let te = resolve_labels(&s, LabelMode::Testing);
            assert!(te.keep);
            for i in 0..N_LABELS {
                assert_eq!(tr.targets[i], s[i] == LabelState::Present);
                assert_eq!(te.targets[i], s[i] == LabelState::Present);
                assert_eq!(te.mask[i], s[i] != LabelState::Uncertain);
                if tr.keep {
                    assert!(tr.mask[i]);
                }
            }
        }
    }
}

#[test]
fn presence_rates_match_prevalences_within_three_sigma() {
    let spec = SiteSpec { image_size: 8, ..SiteSpec::site_a() }.with_image_count(6000);
    let data = generate_site(&spec, 4).unwrap();
    let n = data.len() as f64;
    for l in 0..N_LABELS {
        let p = spec.label_prevalences[l];
        let hits = data
            .records
            .iter()
            .filter(|r| matches!(r.label_states[l], LabelState::Present | LabelState::Uncertain))
            .count() as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((hits / n - p).abs() <= 3.0 * sigma, "label {l}: {} vs {p}", hits / n);
    }
}

#[test]
fn tall_image_is_padded_left_and_right() {
    // 30 rows by 20 columns: five zero columns on each side.
    let data: Vec<f32> = (0..600).map(|i| 0.2 + (i % 7) as f32 / 10.0).collect();
    let img = RawImage::new(30, 20, data.clone()).unwrap();
    let sq = pad_to_square(&img);
    assert_eq!((sq.height, sq.width), (30, 30));
    for r in 0..30 {
        for c in 0..30 {
            let expect = if (5..25).contains(&c) { data[r * 20 + c - 5] } else { 0.0 };
            assert_eq!(sq.at(r, c), expect);
        }
    }
}

#[test]
fn equalized_noise_is_close_to_uniform() {
    use rand::{RngExt, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    // Skewed but spread input: no 256-level bin holds more than 1.5% of
    // pixels, so equalization can flatten it to 16-bin resolution.
    let n = 64 * 64;
    let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>().powf(1.3)).collect();
    let eq = equalize_histogram(&data);
    let bins = 16;
    let mut counts = vec![0f64; bins];
    for &v in &eq {
        counts[((v * bins as f32) as usize).min(bins - 1)] += 1.0;
    }
    let e = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    // 99.9th percentile of chi-square with 15 degrees of freedom.
    assert!(chi2 < 37.70, "chi2 = {chi2}");
}
