mod common;

use common::*;
use numcore::{Rng, Tensor};
use prefmoe::model::RewardModel;
use prefmoe::model::{ModelConfig, PrefMoe};
use proptest::prelude::*;

fn arb_model(k: usize, seed: u64, scale: f64) -> PrefMoe {
    let mut m = PrefMoe::new(tiny_config(k), seed).unwrap();
    randomize(&mut m, scale, &mut Rng::new(seed ^ 0x5eed));
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_on_simplex_and_mixture_convex(seed in any::<u64>(), k in 1usize..5, t in 1usize..7, scale in 0.01f64..2.0) {
        let m = arb_model(k, seed, scale);
        let out = m.forward(&random_batch(3, t, 3, 2, &mut Rng::new(seed.wrapping_add(1)))).unwrap();
        for b in 0..3 {
            let row: Vec<f64> = (0..k).map(|e| out.routing.at(&[b, e])).collect();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&g| g >= 0.0));
            for tt in 0..t {
                let er: Vec<f64> = (0..k).map(|e| out.expert_rewards.at(&[b, e, tt])).collect();
                let lo = er.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = er.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let r = out.rewards.at(&[b, tt]);
                prop_assert!(lo - 1e-12 <= r && r <= hi + 1e-12);
            }
            let direct: f64 = (0..k).map(|e| out.routing.at(&[b, e]) * out.expert_scores.at(&[b, e])).sum();
            let summed: f64 = (0..t).map(|tt| out.rewards.at(&[b, tt])).sum();
            prop_assert!((direct - summed).abs() <= 1e-9);
            prop_assert!((out.score.data()[b] - summed).abs() <= 1e-9);
        }
    }

    #[test]
    fn per_expert_rewards_are_causal(seed in any::<u64>(), k in 1usize..4, t in 0usize..5) {
        let m = arb_model(k, seed, 0.3);
        let mut rng = Rng::new(seed.wrapping_add(2));
        let seg = random_segment(6, 3, 2, &mut rng);
        let mut other = seg.clone();
        for tt in t + 1..6 {
            for c in 0..3 { other.states.set(&[tt, c], 3.0 * rng.normal()); }
            for c in 0..2 { other.actions.set(&[tt, c], 3.0 * rng.normal()); }
        }
        let batch = prefmoe::segment::SegmentBatch::stack([&seg, &other]).unwrap();
        let out = m.forward(&batch).unwrap();
        for e in 0..k {
            for tt in 0..=t {
                prop_assert!((out.expert_rewards.at(&[0, e, tt]) - out.expert_rewards.at(&[1, e, tt])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_expert_reduction_is_bit_exact(seed in any::<u64>(), t in 1usize..7) {
        let m = arb_model(1, seed, 0.5);
        let batch = random_batch(2, t, 3, 2, &mut Rng::new(seed.wrapping_add(3)));
        let out = m.forward(&batch).unwrap();
        let (r, s) = m.single_encoder_forward(&batch, 0).unwrap();
        prop_assert_eq!(&out.rewards, &r);
        prop_assert_eq!(&out.score, &s);
        let pairs = random_pairs(3, t, 3, 2, &mut Rng::new(seed.wrapping_add(4)));
        let loss = prefmoe::objective::total_loss(&m, &prefmoe::datagen::LabeledPair::batch(&pairs).unwrap(), 0.7).unwrap();
        prop_assert_eq!(loss.bal, 0.0);
        prop_assert_eq!(loss.total, loss.bt);
    }

    #[test]
    fn permuting_experts_with_router_rows_changes_nothing(seed in any::<u64>(), k in 2usize..5) {
        let m = arb_model(k, seed, 0.5);
        let mut rng = Rng::new(seed.wrapping_add(5));
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let mut q = m.clone();
        for (to, &from) in perm.iter().enumerate() {
            for n in m.expert_param_names(from) {
                let v = m.params().by_name(&n).unwrap().clone();
                *q.params_mut().by_name_mut(&n.replacen(&format!("expert.{from}."), &format!("expert.{to}."), 1)).unwrap() = v;
            }
        }
        let w = m.params().by_name("router.out.w").unwrap().clone();
        let b = m.params().by_name("router.out.b").unwrap().clone();
        let rows = w.shape()[0];
        let mut w2 = Tensor::zeros([rows, k]);
        let mut b2 = Tensor::zeros([k]);
        for (to, &from) in perm.iter().enumerate() {
            for r in 0..rows { w2.set(&[r, to], w.at(&[r, from])); }
            b2.data_mut()[to] = b.data()[from];
        }
        *q.params_mut().by_name_mut("router.out.w").unwrap() = w2;
        *q.params_mut().by_name_mut("router.out.b").unwrap() = b2;
        let batch = random_batch(2, 5, 3, 2, &mut rng);
        let (a, c) = (m.forward(&batch).unwrap(), q.forward(&batch).unwrap());
        prop_assert!(a.rewards.max_abs_diff(&c.rewards) <= 1e-12);
        prop_assert!(a.score.max_abs_diff(&c.score) <= 1e-12);
    }
}

#[test]
fn default_router_mixture_is_causal() {
    // zero router output layer: uniform weights whatever the future holds
    let cfg = ModelConfig {
        experts: 3,
        ..tiny_config(3)
    };
    let m = PrefMoe::new(cfg, 9).unwrap();
    let mut rng = Rng::new(9);
    let seg = random_segment(6, 3, 2, &mut rng);
    let mut other = seg.clone();
    for c in 0..3 {
        other.states.set(&[5, c], 10.0);
    }
    let out = m
        .forward(&prefmoe::segment::SegmentBatch::stack([&seg, &other]).unwrap())
        .unwrap();
    for t in 0..5 {
        assert!((out.rewards.at(&[0, t]) - out.rewards.at(&[1, t])).abs() <= 1e-12);
    }
}
