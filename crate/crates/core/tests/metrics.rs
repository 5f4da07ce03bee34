mod common;

use afusion_core::autodiff::Tape;
use afusion_core::metrics::{ccc, ccc_loss, masked_eval};
use afusion_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::pairwise_oracle;

#[test]
fn fixed_examples_are_exact() {
    assert_eq!(ccc(&[0.1, 0.5, -0.3], &[0.1, 0.5, -0.3]).unwrap(), 1.0);
    assert_eq!(ccc(&[0.7, 0.7, 0.7], &[0.1, 0.5, -0.3]).unwrap(), 0.0);
    assert_eq!(ccc(&[1.0, -1.0], &[-1.0, 1.0]).unwrap(), -1.0);
    // means 1.5 / 2.75, variances 1.25 / 2.1875, covariance 1.625: 3.25 / 5
    let v = ccc(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 5.0]).unwrap();
    assert!((v - 0.65).abs() < 1e-12, "{v}");
    assert!((pairwise_oracle(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 5.0]) - 0.65).abs() < 1e-12);
}

#[test]
fn matches_pairwise_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.gen_range(2..=500);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.6 * v + rng.gen_range(-0.5..0.5) + 0.1).collect();
        let (got, want) = (ccc(&x, &y).unwrap(), pairwise_oracle(&x, &y));
        assert!((got - want).abs() < 1e-10, "n={n}: {got} vs {want}");
    }
}

#[test]
fn rejects_short_or_mismatched_input() {
    assert!(ccc(&[1.0], &[1.0]).is_err());
    assert!(ccc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    assert_eq!(ccc(&[2.0, 2.0], &[3.0, 3.0]).unwrap(), 0.0);
}

fn loss_of(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() / 2;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(vec![n, 2], pred.to_vec()).unwrap());
    let t = tape.constant(Tensor::new(vec![n, 2], target.to_vec()).unwrap());
    let l = ccc_loss(&mut tape, p, t).unwrap();
    tape.scalar(l)
}

#[test]
fn loss_is_zero_on_perfect_prediction_and_rejects_shape_mismatch() {
    let y = [0.1, -0.2, 0.4, 0.3, -0.5, 0.0, 0.2, 0.9];
    assert!(loss_of(&y, &y).abs() < 1e-6);
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(&[4, 2]));
    let t = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(ccc_loss(&mut tape, p, t).is_err());
}

#[test]
fn masked_eval_uses_only_valid_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let pred: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();

    let all = masked_eval(&pred, &target, &vec![true; n]).unwrap();
    let col = |v: &[f64], d: usize| v.iter().skip(d).step_by(2).copied().collect::<Vec<_>>();
    assert_eq!(all.ccc_valence, ccc(&col(&pred, 0), &col(&target, 0)).unwrap());

    let r = masked_eval(&pred, &target, &mask).unwrap();
    let keep = |v: &[f64], d: usize| (0..n).filter(|&i| mask[i]).map(|i| v[2 * i + d]).collect::<Vec<_>>();
    for (d, got) in [(0, r.ccc_valence), (1, r.ccc_arousal)] {
        let want = pairwise_oracle(&keep(&pred, d), &keep(&target, d));
        assert!((got - want).abs() < 1e-10);
    }
    assert_eq!(r.mean_ccc, (r.ccc_valence + r.ccc_arousal) / 2.0);
    assert!(masked_eval(&pred, &target, &vec![false; n]).is_err());
}

fn series() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..80)
        .prop_filter("non-constant", |v| v.iter().any(|&x| (x - v[0]).abs() > 1e-3))
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    series().prop_flat_map(|x| {
        let n = x.len();
        (Just(x), prop::collection::vec(-10.0f64..10.0, n))
    })
}

proptest! {
    #[test]
    fn self_concordance_is_one(x in series()) {
        prop_assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_bounded((x, y) in pair()) {
        let (a, b) = (ccc(&x, &y).unwrap(), ccc(&y, &x).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn shifted_copy_is_penalized(x in series(), c in prop_oneof![-5.0f64..-0.01, 0.01f64..5.0]) {
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!(ccc(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn loss_lies_in_zero_two((x, y) in pair()) {
        let n = x.len();
        let pred: Vec<f64> = (0..2 * n).map(|i| x[i / 2] * if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let target: Vec<f64> = (0..2 * n).map(|i| y[i / 2]).collect();
        let l = loss_of(&pred, &target);
        prop_assert!((-1e-9..=2.0 + 1e-9).contains(&l), "{}", l);
    }

    #[test]
    fn loss_epsilon_does_not_leak_into_metric((x, y) in pair()) {
        let pred: Vec<f64> = x.iter().flat_map(|&v| [v, v]).collect();
        let target: Vec<f64> = y.iter().flat_map(|&v| [v, v]).collect();
        let metric = ccc(&x, &y).unwrap();
        prop_assert!((metric - pairwise_oracle(&x, &y)).abs() < 1e-10);
        let loss = loss_of(&pred, &target);
        prop_assert!(((1.0 - loss) - metric).abs() < 1e-6);
    }
}
