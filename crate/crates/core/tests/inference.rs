mod common;

use common::*;
use numcore::Rng;
use prefmoe::inference::{
    relabel, relabel_naive, window_routing_trace, BufferFile, RelabelConfig, TransitionBuffer,
};
use prefmoe::model::{MarkovConfig, MarkovReward, ModelConfig, PrefMoe};
use prefmoe::segment::SegmentBatch;

fn learned(k: usize, seed: u64) -> PrefMoe {
    let cfg = ModelConfig {
        max_len: 8,
        ..tiny_config(k)
    };
    let mut m = PrefMoe::new(cfg, seed).unwrap();
    randomize(&mut m, 0.3, &mut Rng::new(seed + 100));
    m
}

fn episodes(n: usize, max_len: usize, seed: u64) -> TransitionBuffer {
    let mut rng = Rng::new(seed);
    let eps = (0..n)
        .map(|_| {
            let len = 1 + rng.index(max_len);
            random_segment(len, 3, 2, &mut rng)
        })
        .collect();
    TransitionBuffer::new(eps).unwrap()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn windowed_relabel_matches_per_window_oracle() {
    let m = learned(3, 1);
    let oracle = Oracle::new(&m);
    let buf = episodes(50, 20, 2);
    for h in [1, 3, 8] {
        let cfg = RelabelConfig { window: h };
        let fast = relabel(&m, &buf, &cfg).unwrap();
        let naive = relabel_naive(&m, &buf, &cfg).unwrap();
        assert!(max_gap(&fast, &naive) <= 1e-9);
        let reference: Vec<Vec<f64>> = buf
            .episodes
            .iter()
            .map(|ep| {
                (0..ep.len())
                    .map(|t| {
                        let len = (t + 1).min(h);
                        oracle.forward(&ep.window(t + 1 - len, len)).rewards[len - 1]
                    })
                    .collect()
            })
            .collect();
        assert!(max_gap(&fast, &reference) <= 1e-9, "window {h}");
    }
}

#[test]
fn short_episodes_equal_full_forward_when_routing_ignores_the_future() {
    let buf = episodes(50, 8, 3);
    let cfg = RelabelConfig { window: 8 };
    let single = learned(1, 4);
    let uniform = PrefMoe::new(
        ModelConfig {
            max_len: 8,
            ..tiny_config(3)
        },
        5,
    )
    .unwrap();
    for m in [&single, &uniform] {
        let got = relabel(m, &buf, &cfg).unwrap();
        for (ep, r) in buf.episodes.iter().zip(&got) {
            let full = m.forward(&SegmentBatch::stack([ep]).unwrap()).unwrap();
            for (t, v) in r.iter().enumerate() {
                assert!((v - full.rewards.at(&[0, t])).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn markov_single_step_windows_are_exact() {
    let m = MarkovReward::new(MarkovConfig::desk(3, 2), 6).unwrap();
    let buf = episodes(20, 15, 7);
    let got = relabel(&m, &buf, &RelabelConfig { window: 1 }).unwrap();
    for (ep, r) in buf.episodes.iter().zip(&got) {
        let direct = m
            .markov_reward(&SegmentBatch::stack([ep]).unwrap())
            .unwrap();
        assert_eq!(r.as_slice(), direct.data());
    }
    assert!(window_routing_trace(&m, &buf, &RelabelConfig { window: 1 }).is_err());
}

#[test]
fn relabel_is_deterministic_and_respects_episode_boundaries() {
    let m = learned(2, 8);
    let buf = episodes(6, 14, 9);
    let cfg = RelabelConfig { window: 4 };
    let a = relabel(&m, &buf, &cfg).unwrap();
    assert_eq!(a, relabel(&m, &buf, &cfg).unwrap());

    let mut changed = buf.clone();
    let last = changed.episodes[0].len() - 1;
    for c in 0..3 {
        changed.episodes[0].states.set(&[last, c], 50.0);
    }
    let b = relabel(&m, &changed, &cfg).unwrap();
    assert_eq!(a[1..], b[1..]);

    let trace = window_routing_trace(&m, &buf, &cfg).unwrap();
    for (ep, rows) in buf.episodes.iter().zip(&trace) {
        assert_eq!(rows.len(), ep.len());
        for g in rows {
            assert_eq!(g.len(), 2);
            assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn invalid_requests_and_file_round_trip() {
    let m = learned(2, 10);
    let buf = episodes(4, 10, 11);
    assert!(relabel(&m, &buf, &RelabelConfig { window: 0 }).is_err());
    assert!(relabel(&m, &buf, &RelabelConfig { window: 9 }).is_err());
    let wrong = TransitionBuffer::new(vec![random_segment(3, 4, 2, &mut Rng::new(1))]).unwrap();
    assert!(relabel(&m, &wrong, &RelabelConfig { window: 2 }).is_err());
    assert!(TransitionBuffer::new(vec![]).is_err());

    let rewards = relabel(&m, &buf, &RelabelConfig { window: 5 }).unwrap();
    let file = BufferFile {
        buffer: buf,
        window: Some(5),
        rewards: Some(rewards),
    };
    let text = file.to_jsonl().unwrap();
    let back = BufferFile::from_jsonl(&text).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_jsonl().unwrap(), text);
}
