//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use steppingnet::engine;
use steppingnet::netgraph::{LayerKind, Level, Model, NetworkSpec, UnitRole};
use steppingnet::tensor::{RngStream, Tensor};

/// A small random network with `subnets` levels, random unit levels
/// (excluded pool included), some zero weights and nonzero biases.
/// Every width is at most 16.
pub fn random_toy(rng: &mut RngStream, subnets: usize) -> Model {
    let width = |rng: &mut RngStream| 1 + rng.below(16) as usize;
    let classes = 2 + rng.below(4) as usize;
    let (input, layers) = match rng.below(3) {
        0 => {
            let c = 1 + rng.below(3) as usize;
            (
                [c, 8, 8],
                vec![
                    LayerKind::Conv { filters: width(rng), kernel: 3, stride: 1, padding: 1 },
                    LayerKind::Relu,
                    LayerKind::Maxpool2,
                    LayerKind::Conv { filters: width(rng), kernel: 2, stride: 2, padding: 0 },
                    LayerKind::Relu,
                    LayerKind::Flatten,
                    LayerKind::Dense { units: width(rng) },
                    LayerKind::Relu,
                    LayerKind::Output { classes },
                ],
            )
        }
        1 => (
            [1, 6, 6],
            vec![
                LayerKind::Conv { filters: width(rng), kernel: 3, stride: 1, padding: 0 },
                LayerKind::Relu,
                LayerKind::Maxpool2,
                LayerKind::Flatten,
                LayerKind::Output { classes },
            ],
        ),
        _ => {
            let d = 1 + rng.below(8) as usize;
            (
                [d, 1, 1],
                vec![
                    LayerKind::Dense { units: width(rng) },
                    LayerKind::Relu,
                    LayerKind::Dense { units: width(rng) },
                    LayerKind::Relu,
                    LayerKind::Output { classes },
                ],
            )
        }
    };
    let spec = NetworkSpec::checked(input, layers).expect("toy spec");
    let mut model = Model::initial(spec, subnets, rng).expect("toy model");
    let output = model.plan.output_layer();
    for w in 0..model.plan.weighted.len() {
        if w != output {
            for lv in &mut model.assign.levels[w] {
                *lv = 1 + rng.below(subnets as u64 + 1) as usize;
            }
        }
        let p = &mut model.params.layers[w];
        for v in p.weight.data_mut() {
            if rng.below(5) == 0 {
                *v = 0.0;
            }
        }
        for b in p.bias.data_mut() {
            *b = (rng.next_normal() * 0.1) as f32;
        }
    }
    model
}

pub fn random_input(rng: &mut RngStream, model: &Model, batch: usize) -> Tensor {
    let [c, h, w] = model.spec.input_shape;
    let data = (0..batch * c * h * w).map(|_| rng.next_normal() as f32).collect();
    Tensor::new(vec![batch, c, h, w], data).unwrap()
}

/// MACs of subnet `k` counted one multiply at a time. Walks the layer list
/// itself to find which unit produced each input element, so it shares no
/// bookkeeping with the library's counter.
pub fn brute_force_macs(model: &Model, k: Level) -> u64 {
    let levels = &model.assign.levels;
    // (channels, h, w, source weighted layer, flattened)
    let [c0, h0, w0] = model.spec.input_shape;
    let mut shape = (c0, h0, w0, None::<usize>, false);
    // level of the unit owning flattened element e, for dense inputs
    let element_level = |shape: &(usize, usize, usize, Option<usize>, bool), e: usize| -> Level {
        let (_, h, w, src, _) = *shape;
        src.map_or(1, |s| levels[s][e / (h * w)])
    };
    let mut total = 0u64;
    let mut weighted = 0;
    for layer in &model.spec.layers {
        match *layer {
            LayerKind::Conv { filters, kernel, stride, padding } => {
                let (c, h, w, src, _) = shape;
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                let weights = model.params.layers[weighted].weight.data();
                for v in 0..filters {
                    let lv = levels[weighted][v];
                    if lv > k {
                        continue;
                    }
                    for ci in 0..c {
                        let lc = src.map_or(1, |s| levels[s][ci]);
                        if lc > lv {
                            continue;
                        }
                        for _oy in 0..oh {
                            for _ox in 0..ow {
                                for t in 0..kernel * kernel {
                                    if weights[(v * c + ci) * kernel * kernel + t] != 0.0 {
                                        total += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                shape = (filters, oh, ow, Some(weighted), false);
                weighted += 1;
            }
            LayerKind::Dense { units } | LayerKind::Output { classes: units } => {
                let is_output = matches!(layer, LayerKind::Output { .. });
                let inputs = shape.0 * shape.1 * shape.2;
                let weights = model.params.layers[weighted].weight.data();
                for v in 0..units {
                    let lv = if is_output { k } else { levels[weighted][v] };
                    if lv > k {
                        continue;
                    }
                    for e in 0..inputs {
                        let le = element_level(&shape, e);
                        if le <= lv && weights[v * inputs + e] != 0.0 {
                            total += 1;
                        }
                    }
                }
                shape = (units, 1, 1, Some(weighted), true);
                weighted += 1;
            }
            LayerKind::Relu => {}
            LayerKind::Maxpool2 => shape = (shape.0, shape.1 / 2, shape.2 / 2, shape.3, false),
            LayerKind::Flatten => shape.4 = true,
        }
    }
    total
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub relative_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

fn loss_at(model: &Model, k: Level, x: &Tensor, y: &[usize], scales: Option<Vec<Vec<f32>>>) -> (f64, Vec<u8>) {
    let acts = engine::forward(model, k, x, scales).unwrap();
    let loss = engine::cross_entropy(acts.logits(), y, model.classes()).unwrap();
    (loss, kink_signature(model, &acts))
}

/// ReLU signs of every hidden pre-activation and the winner of every max-pool window.
fn kink_signature(model: &Model, acts: &engine::LevelActivations) -> Vec<u8> {
    let mut sig = Vec::new();
    for (li, lp) in model.plan.layers.iter().enumerate() {
        match lp.kind {
            LayerKind::Relu => sig.extend(acts.layer_output(li - 1).iter().map(|&v| u8::from(v > 0.0))),
            LayerKind::Maxpool2 => {
                let prev = &model.plan.layers[li - 1];
                let (h, w) = prev.out_hw;
                let input = acts.layer_output(li - 1);
                for plane in input.chunks(h * w) {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut best = 0u8;
                            let mut bv = f32::NEG_INFINITY;
                            for (slot, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                                if v > bv {
                                    bv = v;
                                    best = slot as u8;
                                }
                            }
                            sig.push(best);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    sig
}

fn relative(pairs: &[(f64, f64)]) -> f64 {
    let diff: f64 = pairs.iter().map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    let nn: f64 = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of the level-`k` cross-entropy for every weight and bias.
pub fn check_weight_gradients(model: &Model, k: Level, x: &Tensor, y: &[usize], eps: f32) -> GradCheck {
    let acts = engine::forward(model, k, x, None).unwrap();
    let grads = engine::backward(model, &acts, y).unwrap();
    let (_, base_sig) = loss_at(model, k, x, y, None);
    let mut probe = model.clone();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for l in 0..model.params.layers.len() {
        for which in 0..2 {
            let n = if which == 0 { model.params.layers[l].weight.len() } else { model.params.layers[l].bias.len() };
            for i in 0..n {
                let slot = |m: &mut Model| -> *mut f32 {
                    let p = &mut m.params.layers[l];
                    if which == 0 {
                        &mut p.weight.data_mut()[i]
                    } else {
                        &mut p.bias.data_mut()[i]
                    }
                };
                let orig = unsafe { *slot(&mut probe) };
                let up = orig + eps;
                let dn = orig - eps;
                unsafe { *slot(&mut probe) = up };
                let (lu, su) = loss_at(&probe, k, x, y, None);
                unsafe { *slot(&mut probe) = dn };
                let (ld, sd) = loss_at(&probe, k, x, y, None);
                unsafe { *slot(&mut probe) = orig };
                let analytic = if which == 0 {
                    grads.params.layers[l].weight.data()[i]
                } else {
                    grads.params.layers[l].bias.data()[i]
                } as f64;
                if su != base_sig || sd != base_sig {
                    skipped += 1;
                    continue;
                }
                pairs.push((analytic, (lu - ld) / (up as f64 - dn as f64)));
            }
        }
    }
    GradCheck { relative_error: relative(&pairs), checked: pairs.len(), skipped }
}

/// Central differences of the level-`k` loss in every unit's importance scalar.
pub fn check_importance_gradients(model: &Model, k: Level, x: &Tensor, y: &[usize], eps: f32) -> GradCheck {
    let acts = engine::forward(model, k, x, None).unwrap();
    let grads = engine::backward(model, &acts, y).unwrap();
    let ones: Vec<Vec<f32>> = model.plan.weighted.iter().map(|w| vec![1.0; w.units]).collect();
    let (_, base_sig) = loss_at(model, k, x, y, None);
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (w, wl) in model.plan.weighted.iter().enumerate() {
        if wl.role == UnitRole::Output {
            continue;
        }
        for u in 0..wl.units {
            let mut up = ones.clone();
            up[w][u] = 1.0 + eps;
            let mut dn = ones.clone();
            dn[w][u] = 1.0 - eps;
            let (lu, su) = loss_at(model, k, x, y, Some(up));
            let (ld, sd) = loss_at(model, k, x, y, Some(dn));
            if su != base_sig || sd != base_sig {
                skipped += 1;
                continue;
            }
            let h = (1.0 + eps) as f64 - (1.0 - eps) as f64;
            pairs.push((grads.importance[w][u] as f64, (lu - ld) / h));
        }
    }
    GradCheck { relative_error: relative(&pairs), checked: pairs.len(), skipped }
}

/// Structural problems in a construction run: validation failures, a unit
/// that moved down or skipped a level, an output unit that left level 1,
/// movement through a closed gate, or a subnet that lost a whole layer.
pub fn construction_problems(
    start_levels: &[Vec<Level>],
    report: &steppingnet::construct::ConstructionReport,
    output_layer: usize,
) -> Vec<String> {
    let mut problems: Vec<String> = report.violations.clone();
    let mut prev = start_levels.to_vec();
    for it in &report.iterations {
        for (w, (a, b)) in prev.iter().zip(&it.levels).enumerate() {
            for (u, (&la, &lb)) in a.iter().zip(b).enumerate() {
                if lb < la || lb > la + 1 {
                    problems.push(format!("iteration {}: unit {w}/{u} went {la} -> {lb}", it.iteration));
                }
                if w == output_layer && lb != 1 {
                    problems.push(format!("iteration {}: output unit {u} at level {lb}", it.iteration));
                }
            }
            if w != output_layer && !b.contains(&1) {
                problems.push(format!("iteration {}: layer {w} empty in subnet 1", it.iteration));
            }
        }
        for b in &it.boundaries {
            if b.moved_units > 0 && !(b.over_budget && b.gate_open) {
                problems.push(format!("iteration {}: boundary {} moved through a closed gate", it.iteration, b.level));
            }
        }
        prev = it.levels.clone();
    }
    problems
}

/// All weights joining one source unit (`None` for the raw input) to one
/// destination unit, as a contiguous range of the destination's weight tensor.
#[derive(Debug, Clone)]
pub struct Synapse {
    pub src: Option<(usize, usize)>,
    pub dst: (usize, usize),
    pub weights: std::ops::Range<usize>,
}

/// Enumerates unit-to-unit connections by walking the layer list.
pub fn synapses(model: &Model) -> Vec<Synapse> {
    let [c0, h0, w0] = model.spec.input_shape;
    let (mut c, mut h, mut w, mut src) = (c0, h0, w0, None::<usize>);
    let mut weighted = 0;
    let mut out = Vec::new();
    for layer in &model.spec.layers {
        match *layer {
            LayerKind::Conv { filters, kernel, stride, padding } => {
                let kk = kernel * kernel;
                for v in 0..filters {
                    for u in 0..c {
                        let start = (v * c + u) * kk;
                        out.push(Synapse { src: src.map(|s| (s, u)), dst: (weighted, v), weights: start..start + kk });
                    }
                }
                h = (h + 2 * padding - kernel) / stride + 1;
                w = (w + 2 * padding - kernel) / stride + 1;
                c = filters;
                src = Some(weighted);
                weighted += 1;
            }
            LayerKind::Dense { units } | LayerKind::Output { classes: units } => {
                let hw = h * w;
                let inputs = c * hw;
                for v in 0..units {
                    for u in 0..c {
                        let start = v * inputs + u * hw;
                        out.push(Synapse { src: src.map(|s| (s, u)), dst: (weighted, v), weights: start..start + hw });
                    }
                }
                (c, h, w) = (units, 1, 1);
                src = Some(weighted);
                weighted += 1;
            }
            LayerKind::Maxpool2 => (h, w) = (h / 2, w / 2),
            LayerKind::Relu | LayerKind::Flatten => {}
        }
    }
    out
}
