//! Masked forward and backward propagation per subnet level.
//!
//! Forward evaluation is organised as "compute every unit whose level lies
//! in `(lo, hi]`", reading whatever lower-level values are already cached.
//! A fresh forward at level `k` is the range `(0, k]`; expanding an anytime
//! session from `j` to `k` is the range `(j, k]` over the same cache. Both
//! run the same per-unit kernels in the same order, so a unit's value never
//! depends on the path that produced it.

use thiserror::Error;

use crate::netgraph::{Level, Model, ParameterStore, UnitId, UnitRole, WeightedLayer};
use crate::netgraph::LayerKind;
use crate::tensor::{self, conv_accumulate_slice, conv_backward_slice, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("level {level} outside 1..={subnets}")]
    Level { level: Level, subnets: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid hyperparameter: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Cached per-layer values of a batch evaluated up to some subnet level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelActivations {
    level: Level,
    batch: usize,
    input: Vec<f32>,
    /// Per layer, `batch x out_len`; entries of units above `level` are zero.
    outputs: Vec<Vec<f32>>,
    /// Per weighted layer, the bias-free sums `sum_k d_k * w_k` (before `r`).
    sums: Vec<Vec<f32>>,
    /// Per maxpool layer, window slot of each maximum.
    argmax: Vec<Vec<u8>>,
    /// `batch x classes x subnets`: classifier contributions by source level.
    buckets: Vec<f32>,
    /// Per weighted layer, per unit importance scalar (all ones by default).
    scales: Option<Vec<Vec<f32>>>,
    macs: u64,
}

impl LevelActivations {
    pub fn level(&self) -> Level {
        self.level
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Multiplies executed so far over the whole batch.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// `batch x out_len` values of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &[f32] {
        &self.outputs[layer]
    }

    /// Classifier pre-activations at the current level, `batch x classes`.
    pub fn logits(&self) -> &[f32] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// The level-`level` classifier bucket of sample `b`.
    pub fn bucket(&self, b: usize, level: Level, classes: usize) -> Vec<f32> {
        let n = self.buckets.len() / (self.batch * classes);
        (0..classes).map(|o| self.buckets[(b * classes + o) * n + level - 1]).collect()
    }

    /// Output pre-activations at any level `k <= level` without new MACs:
    /// `bias + bucket_1 + ... + bucket_k`, added in that order.
    pub fn logits_at(&self, model: &Model, k: Level) -> Vec<f32> {
        let classes = model.classes();
        let n = model.subnets();
        let bias = model.params.layers[model.plan.output_layer()].bias.data();
        let mut out = Vec::with_capacity(self.batch * classes);
        for b in 0..self.batch {
            for o in 0..classes {
                let mut z = bias[o];
                for l in 1..=k.min(n) {
                    z += self.buckets[(b * classes + o) * n + l - 1];
                }
                out.push(z);
            }
        }
        out
    }
}

/// Cached forward at subnet level `k`. `batch` is `B x C x H x W` (or
/// `B x features` for vector inputs); `scales` multiplies unit sums, as in
/// `d_j = relu(r_j * sum + b_j)`, and defaults to one everywhere.
pub fn forward(
    model: &Model,
    k: Level,
    batch: &Tensor,
    scales: Option<Vec<Vec<f32>>>,
) -> Result<LevelActivations> {
    check_level(model, k)?;
    let input_len = model.plan.input_len;
    let b = match batch.shape() {
        [] => 0,
        [b, rest @ ..] if rest.iter().product::<usize>() == input_len => *b,
        s => return Err(EngineError::Shape(format!("batch {s:?} does not match input of {input_len} values"))),
    };
    if b == 0 {
        return Err(EngineError::Shape("empty batch".into()));
    }
    if let Some(s) = &scales {
        if s.len() != model.plan.weighted.len() || s.iter().zip(&model.plan.weighted).any(|(v, w)| v.len() != w.units) {
            return Err(EngineError::Shape("importance scales do not match the network".into()));
        }
    }
    let mut acts = LevelActivations {
        level: 0,
        batch: b,
        input: batch.data().to_vec(),
        outputs: model.plan.layers.iter().map(|l| vec![0.0; b * l.out_len]).collect(),
        sums: model.plan.weighted.iter().map(|w| vec![0.0; b * out_len_of(model, w)]).collect(),
        argmax: model
            .plan
            .layers
            .iter()
            .map(|l| if l.kind == LayerKind::Maxpool2 { vec![0; b * l.out_len] } else { Vec::new() })
            .collect(),
        buckets: vec![0.0; b * model.classes() * model.subnets()],
        scales,
        macs: 0,
    };
    extend(model, &mut acts, k)?;
    Ok(acts)
}

fn out_len_of(model: &Model, w: &WeightedLayer) -> usize {
    model.plan.layers[w.layer].out_len
}

fn check_level(model: &Model, k: Level) -> Result<()> {
    if k < 1 || k > model.subnets() {
        return Err(EngineError::Level { level: k, subnets: model.subnets() });
    }
    Ok(())
}

/// Computes every unit with level in `(acts.level, k]`; lower-level values are read, never rewritten.
pub fn extend(model: &Model, acts: &mut LevelActivations, k: Level) -> Result<()> {
    check_level(model, k)?;
    let lo = acts.level;
    if k <= lo {
        return Err(EngineError::Level { level: k, subnets: model.subnets() });
    }
    let plan = &model.plan;
    let assign = &model.assign;
    let unit_level = |src: Option<usize>, e: usize, group: usize| match src {
        Some(s) => assign.levels[s][e / group],
        None => 1,
    };
    let in_range = |l: Level| lo < l && l <= k;
    let b = acts.batch;
    let mut padded = Vec::new();

    for (li, lp) in plan.layers.iter().enumerate() {
        let (prev, rest) = acts.outputs.split_at_mut(li);
        let input: &[f32] = if li == 0 { &acts.input } else { &prev[li - 1] };
        let out = &mut rest[0];
        match lp.kind {
            LayerKind::Conv { .. } => {
                let w = lp.weighted.unwrap();
                let wl = &plan.weighted[w];
                let UnitRole::Conv(geom) = wl.role else { unreachable!() };
                let params = &model.params.layers[w];
                let kk = geom.kernel * geom.kernel;
                let plane = geom.padded_h() * geom.padded_w();
                let pos = geom.out_positions();
                let in_levels: Vec<Level> = (0..wl.inputs).map(|c| assign.input_level(wl, c)).collect();
                let units: Vec<usize> = (0..wl.units).filter(|&f| in_range(assign.levels[w][f])).collect();
                if units.is_empty() {
                    continue;
                }
                let sums = &mut acts.sums[w];
                for s in 0..b {
                    geom.pad_into(&input[s * lp.in_len..(s + 1) * lp.in_len], wl.inputs, &mut padded);
                    for &f in &units {
                        let lf = assign.levels[w][f];
                        let acc = &mut sums[(s * wl.units + f) * pos..][..pos];
                        for c in 0..wl.inputs {
                            if in_levels[c] > lf {
                                continue;
                            }
                            let kernel = &params.weight.data()[(f * wl.inputs + c) * kk..][..kk];
                            acts.macs += conv_accumulate_slice(&geom, &padded[c * plane..][..plane], kernel, acc);
                        }
                        let r = acts.scales.as_ref().map_or(1.0, |r| r[w][f]);
                        let bias = params.bias.data()[f];
                        let dst = &mut out[(s * wl.units + f) * pos..][..pos];
                        for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                            *d = r * a + bias;
                        }
                    }
                }
            }
            LayerKind::Dense { .. } => {
                let w = lp.weighted.unwrap();
                let wl = &plan.weighted[w];
                let params = &model.params.layers[w];
                let in_levels: Vec<Level> = (0..wl.inputs).map(|i| assign.input_level(wl, i)).collect();
                let units: Vec<usize> = (0..wl.units).filter(|&v| in_range(assign.levels[w][v])).collect();
                for s in 0..b {
                    let x = &input[s * wl.inputs..(s + 1) * wl.inputs];
                    for &v in &units {
                        let lv = assign.levels[w][v];
                        let row = &params.weight.data()[v * wl.inputs..(v + 1) * wl.inputs];
                        let mut acc = 0.0f32;
                        for i in 0..wl.inputs {
                            if row[i] != 0.0 && in_levels[i] <= lv {
                                acc += x[i] * row[i];
                                acts.macs += 1;
                            }
                        }
                        let r = acts.scales.as_ref().map_or(1.0, |r| r[w][v]);
                        acts.sums[w][s * wl.units + v] = acc;
                        out[s * wl.units + v] = r * acc + params.bias.data()[v];
                    }
                }
            }
            LayerKind::Output { classes } => {
                let w = lp.weighted.unwrap();
                let wl = &plan.weighted[w];
                let params = &model.params.layers[w];
                let n = model.subnets();
                let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
                for i in 0..wl.inputs {
                    let l = assign.input_level(wl, i);
                    if in_range(l) {
                        by_level[l].push(i);
                    }
                }
                for s in 0..b {
                    let x = &input[s * wl.inputs..(s + 1) * wl.inputs];
                    for o in 0..classes {
                        let row = &params.weight.data()[o * wl.inputs..(o + 1) * wl.inputs];
                        for l in (lo + 1)..=k {
                            let mut acc = 0.0f32;
                            for &i in &by_level[l] {
                                if row[i] != 0.0 {
                                    acc += x[i] * row[i];
                                    acts.macs += 1;
                                }
                            }
                            acts.buckets[(s * classes + o) * n + l - 1] = acc;
                        }
                    }
                }
            }
            LayerKind::Relu => {
                let g = lp.in_group;
                for s in 0..b {
                    let x = &input[s * lp.in_len..(s + 1) * lp.in_len];
                    let y = &mut out[s * lp.out_len..(s + 1) * lp.out_len];
                    for (e, (d, &v)) in y.iter_mut().zip(x).enumerate() {
                        if in_range(unit_level(lp.in_src, e, g)) {
                            *d = v.max(0.0);
                        }
                    }
                }
            }
            LayerKind::Maxpool2 => {
                let (oh, ow) = lp.out_hw;
                let (h, wd) = (oh * 2, ow * 2);
                let argmax = &mut acts.argmax[li];
                for s in 0..b {
                    for c in 0..lp.out_channels {
                        if !in_range(unit_level(lp.in_src, c * h * wd, lp.in_group)) {
                            continue;
                        }
                        let o = s * lp.out_len + c * oh * ow;
                        tensor::maxpool2_plane(
                            &input[s * lp.in_len + c * h * wd..][..h * wd],
                            h,
                            wd,
                            &mut out[o..o + oh * ow],
                            &mut argmax[o..o + oh * ow],
                        );
                    }
                }
            }
            LayerKind::Flatten => {
                let g = lp.in_group;
                for s in 0..b {
                    let x = &input[s * lp.in_len..(s + 1) * lp.in_len];
                    let y = &mut out[s * lp.out_len..(s + 1) * lp.out_len];
                    for (e, (d, &v)) in y.iter_mut().zip(x).enumerate() {
                        if in_range(unit_level(lp.in_src, e, g)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    acts.level = k;
    let logits = acts.logits_at(model, k);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite(format!("classifier output at level {k}")));
    }
    *acts.outputs.last_mut().unwrap() = logits;
    Ok(())
}

/// Row-wise softmax over `classes` logits, computed in f64.
pub fn softmax(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(EngineError::Shape(format!(
            "{} logits for {} labels of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        if y >= classes {
            return Err(EngineError::Shape(format!("label {y} outside {classes} classes")));
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &[f32], labels: &[usize], classes: usize) -> Vec<f32> {
    let n = labels.len() as f64;
    let mut p = softmax(logits, classes);
    for (b, &y) in labels.iter().enumerate() {
        p[b * classes + y] -= 1.0;
    }
    p.into_iter().map(|v| (v / n) as f32).collect()
}

/// Parameter gradients plus `dL_k / dr_j^k` for every unit active at `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub level: Level,
    pub params: ParameterStore,
    /// Per weighted layer, per unit; zero for units outside the subnet and for the classifier.
    pub importance: Vec<Vec<f32>>,
}

/// Backpropagates mean cross-entropy at the activations' level.
pub fn backward(model: &Model, acts: &LevelActivations, labels: &[usize]) -> Result<GradientSet> {
    if labels.len() != acts.batch {
        return Err(EngineError::Shape(format!("{} labels for a batch of {}", labels.len(), acts.batch)));
    }
    let g = cross_entropy_grad(acts.logits(), labels, model.classes());
    backward_from_logits(model, acts, &g)
}

/// Backpropagates an arbitrary gradient of the loss with respect to the logits.
pub fn backward_from_logits(model: &Model, acts: &LevelActivations, dlogits: &[f32]) -> Result<GradientSet> {
    let plan = &model.plan;
    let assign = &model.assign;
    let k = acts.level;
    let b = acts.batch;
    if dlogits.len() != b * model.classes() {
        return Err(EngineError::Shape("logit gradient does not match the batch".into()));
    }
    let mut grads = model.params.zeros_like();
    let mut importance: Vec<Vec<f32>> = plan.weighted.iter().map(|w| vec![0.0; w.units]).collect();
    let mut dy = dlogits.to_vec();
    let mut padded = Vec::new();
    let mut dpadded = Vec::new();

    for (li, lp) in plan.layers.iter().enumerate().rev() {
        let input: &[f32] = if li == 0 { &acts.input } else { &acts.outputs[li - 1] };
        let need_dx = li > 0;
        let mut dx = vec![0.0f32; if need_dx { b * lp.in_len } else { 0 }];
        match lp.kind {
            LayerKind::Output { classes } => {
                let w = lp.weighted.unwrap();
                let wl = &plan.weighted[w];
                let weight = model.params.layers[w].weight.data();
                let active: Vec<usize> = (0..wl.inputs).filter(|&i| assign.input_level(wl, i) <= k).collect();
                let g = &mut grads.layers[w];
                for s in 0..b {
                    let x = &input[s * wl.inputs..(s + 1) * wl.inputs];
                    for o in 0..classes {
                        let d = dy[s * classes + o];
                        g.bias.data_mut()[o] += d;
                        let row = &weight[o * wl.inputs..(o + 1) * wl.inputs];
                        let grow = &mut g.weight.data_mut()[o * wl.inputs..(o + 1) * wl.inputs];
                        for &i in &active {
                            grow[i] += d * x[i];
                            if need_dx && row[i] != 0.0 {
                                dx[s * wl.inputs + i] += d * row[i];
                            }
                        }
                    }
                }
            }
            LayerKind::Dense { .. } => {
                let w = lp.weighted.unwrap();
                let wl = &plan.weighted[w];
                let weight = model.params.layers[w].weight.data();
                let in_levels: Vec<Level> = (0..wl.inputs).map(|i| assign.input_level(wl, i)).collect();
                let g = &mut grads.layers[w];
                for v in (0..wl.units).filter(|&v| assign.levels[w][v] <= k) {
                    let lv = assign.levels[w][v];
                    let r = acts.scales.as_ref().map_or(1.0, |r| r[w][v]);
                    let row = &weight[v * wl.inputs..(v + 1) * wl.inputs];
                    for s in 0..b {
                        let d = dy[s * wl.units + v];
                        importance[w][v] += d * acts.sums[w][s * wl.units + v];
                        g.bias.data_mut()[v] += d;
                        let da = d * r;
                        let x = &input[s * wl.inputs..(s + 1) * wl.inputs];
                        let grow = &mut g.weight.data_mut()[v * wl.inputs..(v + 1) * wl.inputs];
                        for i in 0..wl.inputs {
                            if in_levels[i] <= lv {
                                grow[i] += da * x[i];
                                if need_dx && row[i] != 0.0 {
                                    dx[s * wl.inputs + i] += da * row[i];
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Conv { .. } => {
                let w = lp.weighted.unwrap();
                let wl = &plan.weighted[w];
                let UnitRole::Conv(geom) = wl.role else { unreachable!() };
                let weight = model.params.layers[w].weight.data();
                let kk = geom.kernel * geom.kernel;
                let plane = geom.padded_h() * geom.padded_w();
                let pos = geom.out_positions();
                let in_levels: Vec<Level> = (0..wl.inputs).map(|c| assign.input_level(wl, c)).collect();
                let units: Vec<usize> = (0..wl.units).filter(|&f| assign.levels[w][f] <= k).collect();
                let g = &mut grads.layers[w];
                let mut dacc = vec![0.0f32; pos];
                for s in 0..b {
                    if units.is_empty() {
                        break;
                    }
                    geom.pad_into(&input[s * lp.in_len..(s + 1) * lp.in_len], wl.inputs, &mut padded);
                    if need_dx {
                        dpadded.clear();
                        dpadded.resize(wl.inputs * plane, 0.0);
                    }
                    for &f in &units {
                        let lf = assign.levels[w][f];
                        let r = acts.scales.as_ref().map_or(1.0, |r| r[w][f]);
                        let d = &dy[(s * wl.units + f) * pos..][..pos];
                        let sums = &acts.sums[w][(s * wl.units + f) * pos..][..pos];
                        let mut imp = 0.0f32;
                        let mut db = 0.0f32;
                        for ((&dv, &a), t) in d.iter().zip(sums).zip(dacc.iter_mut()) {
                            imp += dv * a;
                            db += dv;
                            *t = dv * r;
                        }
                        importance[w][f] += imp;
                        g.bias.data_mut()[f] += db;
                        for c in 0..wl.inputs {
                            if in_levels[c] > lf {
                                continue;
                            }
                            let at = (f * wl.inputs + c) * kk;
                            let dplane = if need_dx { Some(&mut dpadded[c * plane..][..plane]) } else { None };
                            conv_backward_slice(
                                &geom,
                                &padded[c * plane..][..plane],
                                &weight[at..at + kk],
                                &dacc,
                                &mut g.weight.data_mut()[at..at + kk],
                                dplane,
                            );
                        }
                    }
                    if need_dx {
                        geom.unpad_add(&dpadded, wl.inputs, &mut dx[s * lp.in_len..(s + 1) * lp.in_len]);
                    }
                }
            }
            LayerKind::Relu => {
                let out = &acts.outputs[li];
                for ((d, &g), &y) in dx.iter_mut().zip(&dy).zip(out) {
                    if y > 0.0 {
                        *d = g;
                    }
                }
            }
            LayerKind::Maxpool2 if need_dx => {
                let (oh, ow) = lp.out_hw;
                let (h, wd) = (oh * 2, ow * 2);
                let argmax = &acts.argmax[li];
                for s in 0..b {
                    for c in 0..lp.out_channels {
                        let o = s * lp.out_len + c * oh * ow;
                        let base = s * lp.in_len + c * h * wd;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let at = o + oy * ow + ox;
                                if dy[at] != 0.0 {
                                    dx[base + tensor::maxpool2_source(wd, oy, ox, argmax[at])] += dy[at];
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Flatten if need_dx => dx.copy_from_slice(&dy),
            LayerKind::Maxpool2 | LayerKind::Flatten => {}
        }
        dy = dx;
    }
    Ok(GradientSet { level: k, params: grads, importance })
}

/// Learning-rate multiplier `beta^(trained - owner)` for a parameter owned by level `owner`.
pub fn suppression(beta: f32, trained: Level, owner: Level) -> f32 {
    if owner >= trained {
        1.0
    } else {
        (beta as f64).powi((trained - owner) as i32) as f32
    }
}

/// Plain SGD on every parameter; a parameter owned by a smaller subnet `i`
/// uses `base_lr * beta^(j - i)` when subnet `j` is trained. Ownership is
/// the larger endpoint level of a synapse, the unit level of a bias, and
/// the source level for classifier synapses. `beta = 1` disables suppression.
pub fn sgd_step(model: &mut Model, grads: &GradientSet, base_lr: f32, beta: f32) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(EngineError::Config(format!("beta must lie in (0, 1], got {beta}")));
    }
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(EngineError::Config(format!("learning rate must be positive, got {base_lr}")));
    }
    let j = grads.level;
    let n = model.subnets();
    let rates: Vec<f32> = (0..=n + 1).map(|i| base_lr * suppression(beta, j, i.max(1))).collect();
    let plan = &model.plan;
    let assign = &model.assign;
    for (w, wl) in plan.weighted.iter().enumerate() {
        let params = &mut model.params.layers[w];
        let g = &grads.params.layers[w];
        let in_levels: Vec<Level> = (0..wl.inputs).map(|i| assign.input_level(wl, i)).collect();
        let per_input = match wl.role {
            UnitRole::Conv(geom) => geom.kernel * geom.kernel,
            _ => 1,
        };
        let weight = params.weight.data_mut();
        let gw = g.weight.data();
        for v in 0..wl.units {
            let lv = if wl.role == UnitRole::Output { 1 } else { assign.levels[w][v] };
            for i in 0..wl.inputs {
                let owner = in_levels[i].max(lv);
                if owner > j {
                    continue;
                }
                let lr = rates[owner];
                let at = (v * wl.inputs + i) * per_input;
                for t in at..at + per_input {
                    weight[t] -= lr * gw[t];
                }
            }
            if lv <= j {
                params.bias.data_mut()[v] -= rates[lv] * g.bias.data()[v];
            }
        }
    }
    Ok(())
}

/// Running mean of `|dL_k / dr_j^k|` per unit and level over one construction iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceLedger {
    /// `[level - 1][weighted layer][unit]`.
    sums: Vec<Vec<Vec<f64>>>,
    batches: Vec<u64>,
}

impl ImportanceLedger {
    pub fn new(model: &Model) -> Self {
        let per_level: Vec<Vec<f64>> = model.plan.weighted.iter().map(|w| vec![0.0; w.units]).collect();
        Self { sums: vec![per_level; model.subnets()], batches: vec![0; model.subnets()] }
    }

    pub fn reset(&mut self) {
        for level in &mut self.sums {
            for layer in level.iter_mut() {
                layer.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.batches.iter_mut().for_each(|c| *c = 0);
    }

    pub fn record(&mut self, grads: &GradientSet) {
        let l = grads.level - 1;
        for (dst, src) in self.sums[l].iter_mut().zip(&grads.importance) {
            for (d, &g) in dst.iter_mut().zip(src) {
                *d += (g as f64).abs();
            }
        }
        self.batches[l] += 1;
    }

    /// Mean `|dL_level / dr_unit|`; zero if nothing was recorded.
    pub fn mean(&self, id: UnitId, level: Level) -> f64 {
        let n = self.batches[level - 1];
        if n == 0 {
            0.0
        } else {
            self.sums[level - 1][id.layer][id.unit] / n as f64
        }
    }

    pub fn batches(&self, level: Level) -> u64 {
        self.batches[level - 1]
    }

    /// Overwrites one entry's running sum; for tests and replaying logs.
    pub fn set(&mut self, id: UnitId, level: Level, mean: f64) {
        if self.batches[level - 1] == 0 {
            self.batches[level - 1] = 1;
        }
        self.sums[level - 1][id.layer][id.unit] = mean * self.batches[level - 1] as f64;
    }
}

/// Predicted class per sample: argmax with the lowest index winning ties.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{LayerKind, NetworkSpec};
    use crate::tensor::RngStream;

    fn toy(rng: &mut RngStream) -> Model {
        let spec = NetworkSpec::checked(
            [2, 6, 6],
            vec![
                LayerKind::Conv { filters: 4, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::Maxpool2,
                LayerKind::Flatten,
                LayerKind::Dense { units: 5 },
                LayerKind::Relu,
                LayerKind::Output { classes: 3 },
            ],
        )
        .unwrap();
        let mut m = Model::initial(spec, 3, rng).unwrap();
        for levels in m.assign.levels.iter_mut().take(2) {
            for l in levels.iter_mut() {
                *l = 1 + rng.below(4) as usize;
            }
        }
        m
    }

    fn batch(rng: &mut RngStream, b: usize, len: usize) -> Tensor {
        Tensor::new(vec![b, len], (0..b * len).map(|_| rng.next_f64() as f32 - 0.3).collect()).unwrap()
    }

    #[test]
    fn unit_scales_of_one_change_nothing() {
        let mut rng = RngStream::new(5);
        let m = toy(&mut rng);
        let x = batch(&mut rng, 3, 72);
        let ones = m.plan.weighted.iter().map(|w| vec![1.0; w.units]).collect();
        let a = forward(&m, 3, &x, None).unwrap();
        let b = forward(&m, 3, &x, Some(ones)).unwrap();
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn cross_entropy_values() {
        let ce = cross_entropy(&[0.0; 10], &[3], 10).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let mut z = vec![0.0f32; 10];
        z[4] = 80.0;
        assert!(cross_entropy(&z, &[4], 10).unwrap() < 1e-30);
        let mut rng = RngStream::new(8);
        let z: Vec<f32> = (0..12).map(|_| (rng.next_normal() * 3.0) as f32).collect();
        let labels = [1, 0, 3];
        let mut want = 0.0;
        for (row, &y) in z.chunks(4).zip(&labels) {
            let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            want -= ((row[y] as f64).exp() / denom).ln();
        }
        want /= 3.0;
        assert!((cross_entropy(&z, &labels, 4).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn suppression_multipliers() {
        assert_eq!(suppression(0.9, 3, 3), 1.0);
        assert!((suppression(0.9, 4, 1) - 0.729).abs() < 1e-7);
        assert!((suppression(0.9, 2, 1) - 0.9).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_beta_and_level() {
        let mut rng = RngStream::new(1);
        let mut m = toy(&mut rng);
        let x = batch(&mut rng, 2, 72);
        let acts = forward(&m, 2, &x, None).unwrap();
        let g = backward(&m, &acts, &[0, 1]).unwrap();
        assert!(sgd_step(&mut m, &g, 0.1, 0.0).is_err());
        assert!(sgd_step(&mut m, &g, 0.1, 1.5).is_err());
        assert!(matches!(forward(&m, 4, &x, None), Err(EngineError::Level { .. })));
        assert!(matches!(forward(&m, 0, &x, None), Err(EngineError::Level { .. })));
    }

    #[test]
    fn zero_incoming_weights_zero_importance() {
        let mut rng = RngStream::new(3);
        let mut m = toy(&mut rng);
        m.assign.levels[1][2] = 1;
        let row = &mut m.params.layers[1].weight.data_mut()[2 * 36..3 * 36];
        row.iter_mut().for_each(|w| *w = 0.0);
        let x = batch(&mut rng, 4, 72);
        let acts = forward(&m, 3, &x, None).unwrap();
        let g = backward(&m, &acts, &[0, 1, 2, 0]).unwrap();
        assert_eq!(g.importance[1][2], 0.0);
    }

    #[test]
    fn ledger_means() {
        let mut rng = RngStream::new(3);
        let m = toy(&mut rng);
        let mut ledger = ImportanceLedger::new(&m);
        let mut g = GradientSet {
            level: 2,
            params: m.params.zeros_like(),
            importance: m.plan.weighted.iter().map(|w| vec![0.0; w.units]).collect(),
        };
        g.importance[0][1] = -2.0;
        ledger.record(&g);
        g.importance[0][1] = 1.0;
        ledger.record(&g);
        let id = UnitId { layer: 0, unit: 1 };
        assert_eq!(ledger.mean(id, 2), 1.5);
        assert_eq!(ledger.mean(id, 1), 0.0);
        ledger.reset();
        assert_eq!(ledger.batches(2), 0);
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.1, 1.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
