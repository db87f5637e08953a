use hybrid_distill::autodiff::{grad_check, Tape};
use hybrid_distill::distill::{kl_loss, kl_value, KlDirection};
use hybrid_distill::graph::Graph;
use hybrid_distill::rng::Rng;
use hybrid_distill::Tensor;
use proptest::prelude::*;

/// Direct f64 evaluation of `KL(p ‖ q)` for softmax(a / τ) and softmax(b / τ).
fn oracle_kl(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let soft = |z: &[f64]| {
        let e: Vec<f64> = z.iter().map(|x| (x / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p, q) = (soft(a), soft(b));
    p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum()
}

fn logits(rows: usize, v: usize, seed: u64, scale: f32) -> Tensor {
    Rng::new(seed).normal_tensor(vec![rows, v], scale)
}

#[test]
fn identical_logits_give_zero() {
    let z = logits(6, 9, 1, 3.0);
    for dir in [KlDirection::Reverse, KlDirection::Forward] {
        assert_eq!(kl_value(&z, &z, 1.0, dir).unwrap(), 0.0);
    }
}

#[test]
fn two_class_hand_value() {
    // Student uniform, teacher (3/4, 1/4):
    // ½ ln(½ / ¾) + ½ ln(½ / ¼) = 0.143841
    let student = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let teacher = Tensor::new(vec![1, 2], vec![3f32.ln(), 0.0]).unwrap();
    let v = kl_value(&student, &teacher, 1.0, KlDirection::Reverse).unwrap() as f64;
    let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((expected - 0.14384).abs() < 1e-4);
    assert!((v - 0.14384).abs() < 1e-4, "{v}");
}

#[test]
fn matches_direct_evaluation_with_temperature() {
    let (s, t) = (logits(5, 7, 2, 2.0), logits(5, 7, 3, 2.0));
    for tau in [0.5f32, 1.0, 2.0] {
        let rows = |x: &Tensor| -> Vec<Vec<f64>> { x.data().chunks(7).map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
        let (rs, rt) = (rows(&s), rows(&t));
        let rev: f64 = rs.iter().zip(&rt).map(|(a, b)| oracle_kl(a, b, tau as f64)).sum::<f64>() / 5.0;
        let fwd: f64 = rs.iter().zip(&rt).map(|(a, b)| oracle_kl(b, a, tau as f64)).sum::<f64>() / 5.0;
        let got_rev = kl_value(&s, &t, tau, KlDirection::Reverse).unwrap() as f64;
        let got_fwd = kl_value(&s, &t, tau, KlDirection::Forward).unwrap() as f64;
        assert!((got_rev - rev).abs() < 1e-5 * rev.max(1.0), "tau {tau}: {got_rev} vs {rev}");
        assert!((got_fwd - fwd).abs() < 1e-5 * fwd.max(1.0), "tau {tau}: {got_fwd} vs {fwd}");
    }
}

#[test]
fn rejects_bad_inputs() {
    let z = logits(2, 3, 4, 1.0);
    assert!(kl_value(&z, &logits(3, 3, 4, 1.0), 1.0, KlDirection::Reverse).is_err());
    assert!(kl_value(&z, &z, 0.0, KlDirection::Reverse).is_err());
}

#[test]
fn gradient_matches_finite_differences() {
    for (i, dir) in [KlDirection::Reverse, KlDirection::Forward].into_iter().enumerate() {
        for point in 0..5u64 {
            let teacher = logits(3, 6, 100 + point, 2.0);
            let student = logits(3, 6, 200 + point, 2.0);
            let tau = [1.0f32, 2.0][i];
            let report = grad_check(
                |tape: &mut Tape, x| {
                    let mut g = Graph::inference();
                    std::mem::swap(&mut g.tape, tape);
                    let y = kl_loss(&mut g, x, &teacher, tau, dir);
                    std::mem::swap(&mut g.tape, tape);
                    y
                },
                &student,
                1e-3,
            )
            .unwrap();
            assert!(report.passes(1e-3), "{dir:?} point {point}: {}", report.max_rel_error);
        }
    }
}

proptest! {
    #[test]
    fn shift_invariant_and_nonnegative(seed in 0u64..1000, shift_s in -50f32..50.0, shift_t in -50f32..50.0) {
        let (s, t) = (logits(4, 5, seed, 2.0), logits(4, 5, seed + 7, 2.0));
        let shifted = |x: &Tensor, c: f32| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()).unwrap();
        for dir in [KlDirection::Reverse, KlDirection::Forward] {
            let base = kl_value(&s, &t, 1.0, dir).unwrap();
            let moved = kl_value(&shifted(&s, shift_s), &shifted(&t, shift_t), 1.0, dir).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((base - moved).abs() <= 1e-4 * base.max(1.0), "{} vs {}", base, moved);
        }
    }
}
