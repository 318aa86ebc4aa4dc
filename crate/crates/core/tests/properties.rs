mod common;

use proptest::prelude::*;
use steppingnet::anytime::InferenceSession;
use steppingnet::construct;
use steppingnet::data::epoch_batches;
use steppingnet::distill;
use steppingnet::engine;
use steppingnet::netgraph::{synapse_active, validate};
use steppingnet::tensor::RngStream;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subnets_nest(lu in 1usize..6, lv in 1usize..6, k in 1usize..5) {
        if synapse_active(lu, lv, k) {
            prop_assert!(synapse_active(lu, lv, k + 1));
            prop_assert!(lu <= lv && lv <= k);
        }
    }

    #[test]
    fn random_nets_validate_and_nest(seed in any::<u64>()) {
        let model = common::random_toy(&mut RngStream::new(seed), 4);
        prop_assert!(validate(&model.assign, 4).is_empty());
        let c = model.mac_counts();
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn moves_never_invalidate(seed in any::<u64>(), level in 1usize..5, take in 0usize..6) {
        let mut rng = RngStream::new(seed);
        let mut model = common::random_toy(&mut rng, 4);
        let output = model.plan.output_layer();
        let movers: Vec<_> = model.assign.units_at(level).filter(|id| id.layer != output).take(take).collect();
        let before = model.mac_counts();
        construct::apply_move(&mut model.assign, &movers, level).unwrap();
        prop_assert!(validate(&model.assign, 4).is_empty());
        let after = model.mac_counts();
        // smaller subnets are untouched and subnet `level` never gains work;
        // larger ones may gain synapses from sources already at `level + 1`
        for k in 1..level {
            prop_assert_eq!(after[k - 1], before[k - 1]);
        }
        prop_assert!(after[level - 1] <= before[level - 1]);
    }

    #[test]
    fn expand_reuses_cache(seed in any::<u64>(), start in 1usize..5, mask in 0u32..16) {
        let mut rng = RngStream::new(seed);
        let model = common::random_toy(&mut rng, 4);
        let x = common::random_input(&mut rng, &model, 1);
        let (mut s, _) = InferenceSession::start(&model, x.data(), start).unwrap();
        let mut last = start;
        for l in start + 1..=4 {
            if mask & (1 << l) != 0 {
                let before = s.meter();
                let p = s.expand(l).unwrap();
                prop_assert_eq!(s.meter() - before, model.mac_count(l) - model.mac_count(last));
                prop_assert_eq!(p, InferenceSession::start(&model, x.data(), l).unwrap().1);
                last = l;
            }
        }
    }

    #[test]
    fn kd_is_non_negative(seed in any::<u64>(), classes in 2usize..8, gamma in 0.0f64..=1.0) {
        let mut rng = RngStream::new(seed);
        let student: Vec<f32> = (0..classes).map(|_| (rng.next_normal() * 3.0) as f32).collect();
        let teacher: Vec<f32> = (0..classes).map(|_| (rng.next_normal() * 3.0) as f32).collect();
        let label = rng.below(classes as u64) as usize;
        let l = distill::kd_loss(&student, &teacher, &[label], classes, gamma).unwrap();
        prop_assert!(l >= 0.0);
        let p = engine::softmax(&teacher, classes);
        prop_assert_eq!(distill::kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn batches_cover_each_sample_once(n in 1usize..300, bs in 1usize..40, seed in any::<u64>()) {
        let batches = epoch_batches(n, bs, &mut RngStream::new(seed));
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
    }
}
