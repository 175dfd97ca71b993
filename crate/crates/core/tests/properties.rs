mod common;

use ndarray::Array1;
use proptest::prelude::*;

use fastrec::classifiers::HypothesisBank;
use fastrec::container::Artifact;
use fastrec::dataset::{occlude, OcclusionSpec};
use fastrec::features::Dictionary;
use fastrec::feedback::{merge_layer2, FeedbackConfig, Scheme};
use fastrec::harness::config::parse_settings;
use fastrec::harness::toy::likelihood_ratio;
use fastrec::harness::{
    accuracy, activity_rows, eval_feedback, per_class_accuracy, ExperimentSpec,
};
use fastrec::memory::{ActivityStore, ClusterMemory};

fn merged_along(x: [f64; 2], mu1: [f64; 2], a: f64) -> [f64; 2] {
    [
        (x[0] + a * mu1[0]) / (1.0 + a),
        (x[1] + a * mu1[1]) / (1.0 + a),
    ]
}

#[test]
fn ratio_can_rise_when_merging_away_from_the_nearest_center() {
    let (mu1, mu2, x) = ([0.0, 0.0], [1.0, 0.0], [3.0, 1.0]);
    let before = likelihood_ratio(x, mu1, mu2);
    let after = likelihood_ratio(merged_along(x, mu1, 1.0 / 9.0), mu1, mu2);
    assert!((before - 2.0).abs() < 1e-12);
    assert!((after - 8.1 / 3.7).abs() < 1e-12, "{after}");
}

proptest! {
    #[test]
    fn merge_contracts_towards_the_sample(
        h in prop::collection::vec(0.0f64..10.0, 1..64),
        seed in any::<u64>(),
        alpha in 0.0f64..50.0,
    ) {
        let h = Array1::from(h);
        let s = h.mapv(|v| (v * 1.7 + (seed % 97) as f64).sin().abs() * 5.0);
        let m = merge_layer2(h.view(), s.view(), alpha);
        let d = |a: &Array1<f64>| (a - &s).mapv(|v| v * v).sum().sqrt();
        let want = d(&h) / (1.0 + alpha);
        prop_assert!((d(&m) - want).abs() <= 1e-10 * want.max(f64::MIN_POSITIVE));
    }

    /// Monotone exactly when `(x - mu2) . (mu1 - mu2) >= 0`.
    #[test]
    fn ratio_monotone_iff_x_lies_on_mu1_side(
        mu1 in prop::array::uniform2(-5.0f64..5.0),
        mu2 in prop::array::uniform2(-5.0f64..5.0),
        x in prop::array::uniform2(-5.0f64..5.0),
    ) {
        let d = [mu1[0] - mu2[0], mu1[1] - mu2[1]];
        prop_assume!(d[0].abs() + d[1].abs() > 1e-3);
        let side = (x[0] - mu2[0]) * d[0] + (x[1] - mu2[1]) * d[1];
        prop_assume!(side.abs() > 1e-6);
        let alphas = [0.0, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 1e3];
        let r: Vec<f64> = alphas.iter().map(|&a| likelihood_ratio(merged_along(x, mu1, a), mu1, mu2)).collect();
        let monotone = r.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        if side > 0.0 {
            prop_assert!(monotone, "ratios {:?}", r);
        } else {
            // starts rising: the denominator shrinks for small alpha
            let tiny = likelihood_ratio(merged_along(x, mu1, 1e-6), mu1, mu2);
            prop_assert!(tiny > r[0]);
        }
    }

    #[test]
    fn occluder_covers_the_requested_square(f in 0.0f64..0.99, fill in 1u8..=255) {
        let spec = OcclusionSpec::new(f).unwrap();
        let img = fastrec::dataset::ImageRecord::new(0, vec![fill; 3072]).unwrap();
        let out = occlude(&img, &spec);
        let zeros = out.pixels().iter().filter(|&&p| p == 0).count();
        prop_assert_eq!(zeros, 3 * spec.side() * spec.side());
        prop_assert_eq!(spec.side(), (32.0 * f.sqrt()).round() as usize);
        for c in 0..3 {
            for r in spec.span() {
                for col in spec.span() {
                    prop_assert_eq!(out.pixel(c, r, col), 0);
                }
            }
        }
    }

    #[test]
    fn class_accuracies_average_to_overall(
        pairs in prop::collection::vec((0u8..10, 0u8..10), 1..200),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let per_class = per_class_accuracy(&pred, &truth, 10);
        let weighted: f64 = (0..10)
            .map(|c| per_class[c] * truth.iter().filter(|&&y| y == c as u8).count() as f64)
            .sum::<f64>()
            / truth.len() as f64;
        prop_assert!((weighted - accuracy(&pred, &truth)).abs() < 1e-12);
    }

    #[test]
    fn settings_round_trip(
        k2 in prop::collection::vec(1usize..200, 1..4),
        alpha in 0.0f64..4.0,
        iterations in 0usize..8,
        m in 1usize..=3,
        scheme in prop::sample::select(vec![Scheme::WinnerTakesAll, Scheme::Average, Scheme::NonClassSpecific]),
        seed in 0u64..1000,
    ) {
        let spec = ExperimentSpec {
            k2,
            feedback: vec![FeedbackConfig { alpha, iterations, m, scheme, ..FeedbackConfig::default() }],
            seed,
            ..ExperimentSpec::desk()
        };
        let back = ExperimentSpec::from_settings(&spec.to_settings()).unwrap();
        prop_assert_eq!(back, spec);
    }
}

#[test]
fn settings_file_comments_and_underscores() {
    let s = parse_settings("# header\nsvm_epochs = 7  # trailing\n\nk=12\n").unwrap();
    assert_eq!(s.get("svm-epochs").map(String::as_str), Some("7"));
    assert_eq!(s.get("k").map(String::as_str), Some("12"));
    assert!(parse_settings("no equals sign").is_err());
}

fn reload<A: Artifact>(a: &A, dir: &std::path::Path, name: &str) -> (A, Vec<u8>) {
    let path = dir.join(name);
    a.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (A::load(&path).unwrap(), bytes)
}

#[test]
fn saved_artifacts_reload_to_identical_predictions() {
    let tiny = common::tiny();
    let a = &tiny.artifacts;
    let dir = tempfile::tempdir().unwrap();
    let (dict, dict_bytes): (Dictionary, _) = reload(&a.dictionary, dir.path(), "d.bin");
    let (store, _): (ActivityStore, _) = reload(&a.store, dir.path(), "s.bin");
    let (mem, _): (ClusterMemory, _) = reload(&a.memory, dir.path(), "m.bin");
    let (bank, _): (HypothesisBank, _) = reload(&a.bank, dir.path(), "b.bin");
    let (_, again) = reload(&dict, dir.path(), "d2.bin");
    assert_eq!(dict_bytes, again);

    let truth: Vec<u8> = tiny.test.iter().map(|r| r.label()).collect();
    let cfg = FeedbackConfig {
        layer1_feedback: true,
        ..FeedbackConfig::default()
    };
    let run = |d: &Dictionary, s: &ActivityStore, m: &ClusterMemory, b: &HypothesisBank| {
        let rows = activity_rows(&tiny.test, d, s.lowpass, 0.25).unwrap();
        let images: Vec<_> = tiny
            .test
            .iter()
            .map(|r| occlude(r, &OcclusionSpec::new(0.25).unwrap()))
            .collect();
        eval_feedback(&images, rows.view(), &truth, d, m, s, b, &cfg).unwrap()
    };
    let original = run(&a.dictionary, &a.store, &a.memory, &a.bank);
    let loaded = run(&dict, &store, &mem, &bank);
    assert_eq!(original.labels, loaded.labels);
    assert_eq!(original.accuracy_by_iteration, loaded.accuracy_by_iteration);
}

#[test]
fn loading_the_wrong_kind_fails() {
    let tiny = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.bin");
    tiny.artifacts.bank.save(&path).unwrap();
    assert!(Dictionary::load(&path).is_err());
}
