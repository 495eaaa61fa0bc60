mod common;

use common::{ce_oracle, miou_oracle, random_confusion, rng};
use pgmfuse::evaluate::ConfusionMatrix;
use pgmfuse::labels::NUM_CLASSES;
use pgmfuse::nn::{weighted_ce, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn weighted_ce_matches_oracle() {
    let mut r = rng(11);
    for _ in 0..50 {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=8), r.gen_range(1..=16), NUM_CLASSES];
        let cells = shape[0] * shape[1] * shape[2];
        let logits: Vec<f64> = (0..cells * NUM_CLASSES).map(|_| r.gen_range(-6.0..6.0)).collect();
        let target: Vec<u32> = (0..cells).map(|_| r.gen_range(0..NUM_CLASSES as u32)).collect();
        let weights: Vec<f64> = (0..NUM_CLASSES).map(|_| r.gen_range(0.0..50.0)).collect();
        let t = Tensor::from_vec(shape, logits.clone()).unwrap();
        let (loss, _) = weighted_ce(&t, &target, &weights).unwrap();
        let want = ce_oracle(&logits, NUM_CLASSES, &target, &weights);
        assert!((loss - want).abs() <= 1e-6 * want.abs().max(1e-12), "{loss} vs {want}");

        let t32: Tensor<f32> = t.cast();
        let (loss32, _) = weighted_ce(&t32, &target, &weights).unwrap();
        let want32 = ce_oracle(&t32.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), NUM_CLASSES, &target, &weights);
        assert!((loss32 - want32).abs() <= 1e-6 * want32.abs().max(1e-12));
    }
}

#[test]
fn unlabeled_cells_have_no_loss_or_gradient() {
    let mut r = rng(12);
    let shape = [1, 4, 8, NUM_CLASSES];
    let logits: Vec<f64> = (0..32 * NUM_CLASSES).map(|_| r.gen_range(-3.0..3.0)).collect();
    let mut target: Vec<u32> = (0..32).map(|_| r.gen_range(1..NUM_CLASSES as u32)).collect();
    for i in (0..32).step_by(3) {
        target[i] = 0;
    }
    let weights = vec![1.0; NUM_CLASSES];
    let t = Tensor::from_vec(shape, logits.clone()).unwrap();
    let (loss, grad) = weighted_ce(&t, &target, &weights).unwrap();
    for (cell, &y) in target.iter().enumerate() {
        let g = &grad.data[cell * NUM_CLASSES..(cell + 1) * NUM_CLASSES];
        if y == 0 {
            assert!(g.iter().all(|&v| v == 0.0));
        } else {
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }
    let mut changed = logits.clone();
    for cell in (0..32).step_by(3) {
        for k in 0..NUM_CLASSES {
            changed[cell * NUM_CLASSES + k] = r.gen_range(-50.0..50.0);
        }
    }
    let (loss2, _) = weighted_ce(&Tensor::from_vec(shape, changed).unwrap(), &target, &weights).unwrap();
    assert_eq!(loss, loss2);

    let all_zero = vec![0u32; 32];
    let (l0, g0) = weighted_ce(&t, &all_zero, &weights).unwrap();
    assert_eq!(l0, 0.0);
    assert!(g0.data.iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_logits_give_log_c() {
    let t = Tensor::<f64>::zeros([1, 2, 2, NUM_CLASSES]);
    let (loss, _) = weighted_ce(&t, &[1, 2, 3, 4], &[1.0; NUM_CLASSES]).unwrap();
    assert!((loss - (NUM_CLASSES as f64).ln()).abs() < 1e-12);
}

#[test]
fn miou_matches_oracle_on_random_matrices() {
    let mut r = rng(21);
    for _ in 0..40 {
        let m = random_confusion(&mut r);
        let cm = ConfusionMatrix { counts: m };
        let report = cm.miou();
        let (miou, oa) = miou_oracle(&m);
        assert!((report.miou - miou).abs() <= 1e-12, "{} vs {miou}", report.miou);
        assert!((report.oa - oa).abs() <= 1e-12);
    }
}

#[test]
fn hand_computed_two_class_example() {
    let mut cm = ConfusionMatrix::default();
    // truth 1: 3 right, 1 predicted as 2; truth 2: 2 right, 2 predicted as 1
    let truth = [1, 1, 1, 1, 2, 2, 2, 2];
    let pred = [1, 1, 1, 2, 2, 2, 1, 1];
    cm.accumulate(&truth, &pred, None).unwrap();
    let r = cm.miou();
    // IoU1 = 3 / (3 + 2 + 1), IoU2 = 2 / (2 + 1 + 2)
    assert!((r.miou - (0.5 + 0.4) / 2.0).abs() < 1e-12);
    assert!((r.oa - 5.0 / 8.0).abs() < 1e-12);
    assert_eq!(r.per_class[2], None);
}

fn labels(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> (Vec<u32>, Vec<u32>) {
    let t = (0..n).map(|_| r.gen_range(0..NUM_CLASSES as u32)).collect();
    let p = (0..n).map(|_| r.gen_range(0..NUM_CLASSES as u32)).collect();
    (t, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unlabeled_truth_is_excluded(seed in any::<u64>(), extra in 1usize..200) {
        let mut r = rng(seed);
        let (t, p) = labels(&mut r, 300);
        let mut a = ConfusionMatrix::default();
        a.accumulate(&t, &p, None).unwrap();
        let mut t2 = t.clone();
        let mut p2 = p.clone();
        for _ in 0..extra {
            t2.push(0);
            p2.push(r.gen_range(0..NUM_CLASSES as u32));
        }
        let mut b = ConfusionMatrix::default();
        b.accumulate(&t2, &p2, None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn accumulation_is_additive(seed in any::<u64>(), split in 0usize..400) {
        let mut r = rng(seed);
        let (t, p) = labels(&mut r, 400);
        let mut whole = ConfusionMatrix::default();
        whole.accumulate(&t, &p, None).unwrap();
        let mut a = ConfusionMatrix::default();
        a.accumulate(&t[..split], &p[..split], None).unwrap();
        let mut b = ConfusionMatrix::default();
        b.accumulate(&t[split..], &p[split..], None).unwrap();
        a.merge(&b);
        prop_assert_eq!(whole.miou(), a.miou());
        prop_assert_eq!(whole, a);
    }

    #[test]
    fn perfect_prediction_scores_one(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (t, _) = labels(&mut r, 200);
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&t, &t, None).unwrap();
        let rep = cm.miou();
        prop_assert!(rep.miou == 1.0 || t.iter().all(|&v| v == 0));
        prop_assert!((0.0..=1.0).contains(&rep.oa));
    }
}
