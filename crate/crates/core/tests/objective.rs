mod common;

use std::f64::consts::LN_2;

use common::*;
use numcore::{Rng, Tensor};
use prefmoe::datagen::LabeledPair;
use prefmoe::model::PrefMoe;
use prefmoe::objective::{bt_loss, bt_pair_loss, bt_probability, load_balance, total_loss};
use proptest::prelude::*;

#[test]
fn bradley_terry_cases() {
    assert_eq!(bt_probability(1.3, 1.3).unwrap(), 0.5);
    assert!((bt_probability(0.2, 0.2 + 3f64.ln()).unwrap() - 0.75).abs() < 1e-12);
    assert!((bt_loss(&[(0.4, 0.4, 1.0)]) - LN_2).abs() < 1e-12);
    assert!((bt_loss(&[(0.0, 3f64.ln(), 1.0)]) + 0.75f64.ln()).abs() < 1e-12);
    assert!((bt_loss(&[(-2.0, -2.0, 0.5)]) - LN_2).abs() < 1e-12);
    for d in [-3.0, -0.1, 0.05, 2.0] {
        assert!(bt_pair_loss(0.0, d, 0.5) > LN_2);
    }
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let c = rng.uniform_range(-1e3, 1e3);
        let (a, b) = (rng.normal(), rng.normal());
        assert!(
            (bt_probability(a, b).unwrap() - bt_probability(a + c, b + c).unwrap()).abs() < 1e-12
        );
    }
    assert!(bt_probability(f64::NAN, 0.0).is_err());
    let p = bt_probability(0.0, 1e4).unwrap();
    assert!(p.is_finite() && bt_pair_loss(0.0, 1e4, 0.0).is_finite());
}

#[test]
fn load_balance_cases() {
    assert!(load_balance(&Tensor::full([5, 4], 0.25)).unwrap().abs() < 1e-15);
    let hot = Tensor::new([3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((load_balance(&hot).unwrap() - 0.5).abs() < 1e-12);
    let half = Tensor::new([4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(load_balance(&half).unwrap(), 0.0);
    assert!(load_balance(&Tensor::new([1, 2], vec![0.7, 0.7]).unwrap()).is_err());
}

proptest! {
    #[test]
    fn probabilities_are_antisymmetric(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        prop_assert!((bt_probability(a, b).unwrap() + bt_probability(b, a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn swapping_segments_flips_the_label(a in -50.0f64..50.0, b in -50.0f64..50.0, y in prop::sample::select(vec![0.0, 0.5, 1.0])) {
        prop_assert!((bt_loss(&[(a, b, y)]) - bt_loss(&[(b, a, 1.0 - y)])).abs() <= 1e-12);
    }

    #[test]
    fn load_balance_stays_in_range(k in 1usize..6, rows in 1usize..20, seed in any::<u64>(), sharp in 0.1f64..20.0) {
        let mut rng = Rng::new(seed);
        let mut g = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            let e: Vec<f64> = (0..k).map(|_| (sharp * rng.normal()).exp()).collect();
            let z: f64 = e.iter().sum();
            g.extend(e.iter().map(|v| v / z));
        }
        let bal = load_balance(&Tensor::new([rows, k], g).unwrap()).unwrap();
        let kf = k as f64;
        prop_assert!(bal >= 0.0);
        prop_assert!(bal <= (1.0 - 1.0 / kf).powi(2) + (kf - 1.0) / (kf * kf) + 1e-12);
    }
}

#[test]
fn combined_objective_matches_loop_oracle() {
    let mut rng = Rng::new(2);
    for (k, seed) in [(1, 3), (2, 4), (3, 5)] {
        let mut m = PrefMoe::new(tiny_config(k), seed).unwrap();
        randomize(&mut m, 0.3, &mut rng);
        let pairs = random_pairs(6, 5, 3, 2, &mut rng);
        let batch = LabeledPair::batch(&pairs).unwrap();
        let oracle = Oracle::new(&m);
        for lambda in [0.0, 1e-2, 3.0] {
            let got = total_loss(&m, &batch, lambda).unwrap();
            let (bt, bal, total) = oracle.total_loss(&pairs, lambda);
            assert!((got.bt - bt).abs() < 1e-9, "{} vs {bt}", got.bt);
            assert!((got.bal - bal).abs() < 1e-9);
            assert!((got.total - total).abs() < 1e-9);
            assert!((got.total - (got.bt + lambda * got.bal)).abs() < 1e-12);
            if lambda == 0.0 {
                assert_eq!(got.total, got.bt);
            }
            if k == 1 {
                assert_eq!(got.bal, 0.0);
            }
        }
        assert!(total_loss(&m, &batch, -1.0).is_err());
    }
}
