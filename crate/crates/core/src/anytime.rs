//! Anytime inference: start at any subnet, expand or reduce without
//! recomputing finished work.

use std::borrow::Borrow;

use thiserror::Error;

use crate::engine::{self, EngineError, LevelActivations};
use crate::netgraph::{Level, Model};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnytimeError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, AnytimeError>;

/// One input being evaluated at a movable subnet level. `M` is how the
/// session holds the model: `&Model`, `Rc<Model>` and so on.
#[derive(Debug, Clone)]
pub struct InferenceSession<M> {
    model: M,
    acts: LevelActivations,
    current: Level,
    /// `meter` after the cache first reached each level (index `level - 1`).
    reached: Vec<Option<u64>>,
}

impl<M: Borrow<Model>> InferenceSession<M> {
    /// Evaluates `input` (one sample, any shape with the right element count) at level `k`.
    pub fn start(model: M, input: &[f32], k: Level) -> Result<(Self, Vec<f64>)> {
        let x = Tensor::new(vec![1, input.len()], input.to_vec())
            .map_err(|e| AnytimeError::Contract(e.to_string()))?;
        let acts = engine::forward(model.borrow(), k, &x, None)?;
        let mut reached = vec![None; model.borrow().subnets()];
        reached[k - 1] = Some(acts.macs());
        let session = Self { model, acts, current: k, reached };
        let p = session.probabilities();
        Ok((session, p))
    }

    pub fn level(&self) -> Level {
        self.current
    }

    pub fn model(&self) -> &Model {
        self.model.borrow()
    }

    /// Highest level whose units are cached.
    pub fn cached_level(&self) -> Level {
        self.acts.level()
    }

    /// MACs executed by this session so far.
    pub fn meter(&self) -> u64 {
        self.acts.macs()
    }

    /// Meter reading when the cache first reached each level, if it did.
    pub fn meter_by_level(&self) -> &[Option<u64>] {
        &self.reached
    }

    /// Moves to a larger subnet, computing only units in `(cached, k]`.
    pub fn expand(&mut self, k: Level) -> Result<Vec<f64>> {
        if k <= self.current {
            return Err(AnytimeError::Contract(format!("expand to {k} from level {}", self.current)));
        }
        let model = self.model.borrow();
        if k > model.subnets() {
            return Err(AnytimeError::Engine(EngineError::Level { level: k, subnets: model.subnets() }));
        }
        if k > self.acts.level() {
            engine::extend(model, &mut self.acts, k)?;
            self.reached[k - 1] = Some(self.acts.macs());
        }
        self.current = k;
        Ok(self.probabilities())
    }

    /// Falls back to a smaller subnet at no MAC cost; caches are kept.
    pub fn reduce(&mut self, k: Level) -> Result<Vec<f64>> {
        if k == 0 || k >= self.current {
            return Err(AnytimeError::Contract(format!("reduce to {k} from level {}", self.current)));
        }
        self.current = k;
        Ok(self.probabilities())
    }

    /// Output pre-activations of the current level.
    pub fn logits(&self) -> Vec<f32> {
        self.acts.logits_at(self.model.borrow(), self.current)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        engine::softmax(&self.logits(), self.model.borrow().classes())
    }

    /// Most probable class (lowest index on ties) and the distribution.
    pub fn predict(&self) -> (usize, Vec<f64>) {
        let p = self.probabilities();
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        (best, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{LayerKind, NetworkSpec};
    use crate::tensor::RngStream;

    fn toy(seed: u64) -> Model {
        let spec = NetworkSpec::checked(
            [1, 4, 4],
            vec![
                LayerKind::Conv { filters: 6, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::Maxpool2,
                LayerKind::Flatten,
                LayerKind::Dense { units: 8 },
                LayerKind::Relu,
                LayerKind::Output { classes: 3 },
            ],
        )
        .unwrap();
        let mut rng = RngStream::new(seed);
        let mut model = Model::initial(spec, 4, &mut rng).unwrap();
        for w in 0..2 {
            for lv in &mut model.assign.levels[w] {
                *lv = 1 + rng.below(5) as usize;
            }
        }
        model
    }

    fn input(seed: u64) -> Vec<f32> {
        let mut rng = RngStream::new(seed);
        (0..16).map(|_| rng.next_normal() as f32).collect()
    }

    #[test]
    fn meter_tracks_mac_count() {
        let model = toy(1);
        let x = input(2);
        let (mut s, _) = InferenceSession::start(&model, &x, 1).unwrap();
        assert_eq!(s.meter(), model.mac_count(1));
        s.expand(2).unwrap();
        assert_eq!(s.meter(), model.mac_count(2));
        s.expand(4).unwrap();
        assert_eq!(s.meter(), model.mac_count(4));
        s.reduce(1).unwrap();
        assert_eq!(s.meter(), model.mac_count(4));
    }

    #[test]
    fn every_ascending_path_matches_a_fresh_start() {
        for seed in 0..5 {
            let model = toy(seed);
            let x = input(seed + 100);
            let fresh: Vec<Vec<f64>> = (1..=4).map(|k| InferenceSession::start(&model, &x, k).unwrap().1).collect();
            // every subset of {2,3,4} appended to every start level
            for start in 1..=4usize {
                for mask in 0u32..8 {
                    let steps: Vec<Level> = (2..=4).filter(|&l| l > start && mask & (1 << (l - 2)) != 0).collect();
                    let (mut s, mut p) = InferenceSession::start(&model, &x, start).unwrap();
                    for &l in &steps {
                        p = s.expand(l).unwrap();
                    }
                    let end = *steps.last().unwrap_or(&start);
                    assert_eq!(p, fresh[end - 1]);
                    assert_eq!(s.meter(), model.mac_count(end));
                }
            }
        }
    }

    #[test]
    fn reduce_round_trip_is_exact() {
        let model = toy(7);
        let x = input(8);
        let (mut s, p3) = InferenceSession::start(&model, &x, 3).unwrap();
        let p1 = InferenceSession::start(&model, &x, 1).unwrap().1;
        assert_eq!(s.reduce(1).unwrap(), p1);
        assert_eq!(s.expand(3).unwrap(), p3);
        assert_eq!(s.meter(), model.mac_count(3));
        let direct = InferenceSession::start(&model, &x, 4).unwrap().1;
        assert_eq!(s.expand(4).unwrap(), direct);
    }

    #[test]
    fn contract_violations() {
        let model = toy(3);
        let x = input(4);
        let (mut s, _) = InferenceSession::start(&model, &x, 2).unwrap();
        assert!(matches!(s.expand(2), Err(AnytimeError::Contract(_))));
        assert!(matches!(s.expand(1), Err(AnytimeError::Contract(_))));
        assert!(matches!(s.reduce(2), Err(AnytimeError::Contract(_))));
        assert!(matches!(s.reduce(0), Err(AnytimeError::Contract(_))));
        assert!(s.expand(5).is_err());
        assert!(InferenceSession::start(&model, &x, 0).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        let spec = NetworkSpec::checked([2, 1, 1], vec![LayerKind::Output { classes: 4 }]).unwrap();
        let mut model = Model::initial(spec, 1, &mut RngStream::new(0)).unwrap();
        model.params.layers[0].weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let (s, _) = InferenceSession::start(&model, &[1.0, 2.0], 1).unwrap();
        let (class, p) = s.predict();
        assert_eq!(class, 0);
        assert!(p.iter().all(|&v| v == 0.25));
        model.params.layers[0].bias.data_mut()[2] = 5.0;
        let (s, _) = InferenceSession::start(&model, &[1.0, 2.0], 1).unwrap();
        assert_eq!(s.predict().0, 2);
    }
}
