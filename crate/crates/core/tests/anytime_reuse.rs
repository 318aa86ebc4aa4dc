mod common;

use steppingnet::anytime::InferenceSession;
use steppingnet::engine;
use steppingnet::tensor::RngStream;

const N: usize = 4;

fn ascending_paths(start: usize) -> Vec<Vec<usize>> {
    let above: Vec<usize> = (start + 1..=N).collect();
    (0u32..1 << above.len())
        .map(|mask| above.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &l)| l).collect())
        .collect()
}

#[test]
fn expansion_equals_fresh_start_on_random_nets() {
    let mut rng = RngStream::new(41);
    for _ in 0..8 {
        let model = common::random_toy(&mut rng, N);
        let batch = common::random_input(&mut rng, &model, 6);
        let per = batch.len() / 6;
        for b in 0..6 {
            let x = &batch.data()[b * per..(b + 1) * per];
            let fresh: Vec<Vec<f32>> =
                (1..=N).map(|k| InferenceSession::start(&model, x, k).unwrap().0.logits()).collect();
            for start in 1..=N {
                for path in ascending_paths(start) {
                    let (mut s, _) = InferenceSession::start(&model, x, start).unwrap();
                    for &l in &path {
                        s.expand(l).unwrap();
                        assert_eq!(s.logits(), fresh[l - 1], "start {start} path {path:?}");
                    }
                    assert_eq!(s.meter(), model.mac_count(*path.last().unwrap_or(&start)));
                }
            }
        }
    }
}

#[test]
fn reduce_is_free_and_exact() {
    let mut rng = RngStream::new(42);
    for _ in 0..8 {
        let model = common::random_toy(&mut rng, N);
        let x = common::random_input(&mut rng, &model, 1);
        let fresh: Vec<Vec<f64>> = (1..=N).map(|k| InferenceSession::start(&model, x.data(), k).unwrap().1).collect();
        let (mut s, _) = InferenceSession::start(&model, x.data(), N).unwrap();
        let meter = s.meter();
        for k in (1..N).rev() {
            assert_eq!(s.reduce(k).unwrap(), fresh[k - 1]);
            assert_eq!(s.meter(), meter);
        }
        // climbing back inside the cache costs nothing either
        for k in 2..=N {
            assert_eq!(s.expand(k).unwrap(), fresh[k - 1]);
            assert_eq!(s.meter(), meter);
        }
    }
}

#[test]
fn batched_extend_matches_batched_forward() {
    let mut rng = RngStream::new(43);
    for _ in 0..6 {
        let model = common::random_toy(&mut rng, N);
        let x = common::random_input(&mut rng, &model, 5);
        let mut acts = engine::forward(&model, 1, &x, None).unwrap();
        for k in 2..=N {
            engine::extend(&model, &mut acts, k).unwrap();
            let direct = engine::forward(&model, k, &x, None).unwrap();
            assert_eq!(acts.logits(), direct.logits());
            assert_eq!(acts.macs(), direct.macs());
            for lower in 1..=k {
                let again = engine::forward(&model, lower, &x, None).unwrap();
                assert_eq!(acts.logits_at(&model, lower), again.logits());
            }
        }
    }
}
