//! The expanded base network, per-unit subnet levels, the synapse activity
//! rule and exact MAC accounting.
//!
//! A *unit* is a filter of a convolution or a neuron of a dense layer. Every
//! unit carries a level `l` in `1..=N+1`: it belongs to subnet `k` iff
//! `l <= k`, and `N + 1` is the excluded pool. A synapse `u -> v` into a
//! hidden unit is active in subnet `k` iff `level(u) <= level(v) <= k`, so a
//! subnet never feeds back into the units of a smaller one. Output units sit
//! at level 1 and take input from every level; their pre-activations are
//! kept as one additive bucket per source level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{he_init, ConvGeometry, RngStream, Tensor, TensorError};

pub type Level = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid network: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameters do not match the network: {0}")]
    Params(String),
    #[error("assignment does not match the network: {0}")]
    Assignment(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { filters: usize, kernel: usize, stride: usize, padding: usize },
    Dense { units: usize },
    Relu,
    Maxpool2,
    Flatten,
    Output { classes: usize },
}

impl LayerKind {
    fn is_weighted(&self) -> bool {
        matches!(self, Self::Conv { .. } | Self::Dense { .. } | Self::Output { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerKind>,
    /// Width multiplier already applied to the hidden layers (1.0 = original).
    pub expansion_ratio: f64,
}

impl NetworkSpec {
    /// Three convolutions and one linear classifier.
    ///
    /// The first convolution's padding is chosen so the three 2x2 poolings
    /// divide evenly (padding 0 for 28x28 inputs, 2 for 32x32).
    pub fn lenet3c1l(input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let h = input_shape[1];
        let padding = (0..=2)
            .find(|p| (h + 2 * p).checked_sub(4).is_some_and(|v| v % 8 == 0))
            .ok_or_else(|| GraphError::Spec(format!("lenet3c1l cannot tile height {h}")))?;
        let layers = vec![
            LayerKind::Conv { filters: 8, kernel: 5, stride: 1, padding },
            LayerKind::Relu,
            LayerKind::Maxpool2,
            LayerKind::Conv { filters: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Maxpool2,
            LayerKind::Conv { filters: 32, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Maxpool2,
            LayerKind::Flatten,
            LayerKind::Output { classes },
        ];
        Self::checked(input_shape, layers)
    }

    /// Classic LeNet-5: two 5x5 convolutions, dense 120 and 84.
    pub fn lenet5(input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let h = input_shape[1];
        let padding = if h == 28 { 2 } else { 0 };
        let layers = vec![
            LayerKind::Conv { filters: 6, kernel: 5, stride: 1, padding },
            LayerKind::Relu,
            LayerKind::Maxpool2,
            LayerKind::Conv { filters: 16, kernel: 5, stride: 1, padding: 0 },
            LayerKind::Relu,
            LayerKind::Maxpool2,
            LayerKind::Flatten,
            LayerKind::Dense { units: 120 },
            LayerKind::Relu,
            LayerKind::Dense { units: 84 },
            LayerKind::Relu,
            LayerKind::Output { classes },
        ];
        Self::checked(input_shape, layers)
    }

    /// VGG-16 for 32x32 inputs: thirteen 3x3 convolutions, dense 512, 512.
    pub fn vgg16(input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for &(width, convs) in &[(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
            for _ in 0..convs {
                layers.push(LayerKind::Conv { filters: width, kernel: 3, stride: 1, padding: 1 });
                layers.push(LayerKind::Relu);
            }
            layers.push(LayerKind::Maxpool2);
        }
        layers.extend([
            LayerKind::Flatten,
            LayerKind::Dense { units: 512 },
            LayerKind::Relu,
            LayerKind::Dense { units: 512 },
            LayerKind::Relu,
            LayerKind::Output { classes },
        ]);
        Self::checked(input_shape, layers)
    }

    pub fn by_name(name: &str, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "lenet3c1l" => Self::lenet3c1l(input_shape, classes),
            "lenet5" => Self::lenet5(input_shape, classes),
            "vgg16" => Self::vgg16(input_shape, classes),
            other => Err(GraphError::Spec(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn checked(input_shape: [usize; 3], layers: Vec<LayerKind>) -> Result<Self> {
        let spec = Self { input_shape, layers, expansion_ratio: 1.0 };
        spec.plan()?;
        Ok(spec)
    }

    /// Hidden widths multiplied by `ratio` and rounded up; the classifier keeps its width.
    pub fn expanded(&self, ratio: f64) -> Result<Self> {
        if !(ratio >= 1.0 && ratio.is_finite()) {
            return Err(GraphError::Spec(format!("expansion ratio must be >= 1, got {ratio}")));
        }
        // ceil with a guard against representation error (5 * 1.8 = 9.000000000000002)
        let scale = |w: usize| ((w as f64 * ratio) - 1e-9).ceil().max(1.0) as usize;
        let layers = self
            .layers
            .iter()
            .map(|l| match *l {
                LayerKind::Conv { filters, kernel, stride, padding } => {
                    LayerKind::Conv { filters: scale(filters), kernel, stride, padding }
                }
                LayerKind::Dense { units } => LayerKind::Dense { units: scale(units) },
                other => other,
            })
            .collect();
        let spec = Self { input_shape: self.input_shape, layers, expansion_ratio: self.expansion_ratio * ratio };
        spec.plan()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerKind::Output { classes }) => *classes,
            _ => 0,
        }
    }

    /// Resolves shapes and unit bookkeeping for every layer.
    pub fn plan(&self) -> Result<Plan> {
        let bad = |m: String| Err(GraphError::Spec(m));
        let outputs = self.layers.iter().filter(|l| matches!(l, LayerKind::Output { .. })).count();
        if outputs != 1 || !matches!(self.layers.last(), Some(LayerKind::Output { .. })) {
            return bad("exactly one output layer is required and it must be last".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has an empty extent", self.input_shape));
        }
        let [c0, h0, w0] = self.input_shape;
        // (channels, height, width, flattened)
        let mut shape = (c0, h0, w0, false);
        let mut src: Option<usize> = None;
        let mut group = h0 * w0;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut weighted: Vec<WeightedLayer> = Vec::new();
        for (index, kind) in self.layers.iter().enumerate() {
            let in_len = shape.0 * shape.1 * shape.2;
            let (in_src, in_group) = (src, group);
            match *kind {
                LayerKind::Conv { filters, kernel, stride, padding } => {
                    if shape.3 {
                        return bad(format!("layer {index}: convolution after flatten"));
                    }
                    if filters == 0 {
                        return bad(format!("layer {index}: convolution without filters"));
                    }
                    let geom = ConvGeometry::new(shape.1, shape.2, kernel, stride, padding)
                        .map_err(|e| GraphError::Spec(format!("layer {index}: {e}")))?;
                    weighted.push(WeightedLayer {
                        layer: index,
                        role: UnitRole::Conv(geom),
                        units: filters,
                        inputs: shape.0,
                        input_src: in_src,
                        input_group: in_group,
                        consumer: None,
                    });
                    shape = (filters, geom.out_h, geom.out_w, false);
                    group = geom.out_positions();
                    src = Some(weighted.len() - 1);
                }
                LayerKind::Dense { units } | LayerKind::Output { classes: units } => {
                    if !shape.3 && (shape.1 != 1 || shape.2 != 1) {
                        return bad(format!("layer {index}: dense layer needs a flatten before it"));
                    }
                    if units == 0 {
                        return bad(format!("layer {index}: layer without units"));
                    }
                    let role = if matches!(kind, LayerKind::Output { .. }) { UnitRole::Output } else { UnitRole::Dense };
                    weighted.push(WeightedLayer {
                        layer: index,
                        role,
                        units,
                        inputs: in_len,
                        input_src: in_src,
                        input_group: in_group,
                        consumer: None,
                    });
                    shape = (units, 1, 1, true);
                    group = 1;
                    src = Some(weighted.len() - 1);
                }
                LayerKind::Relu => {}
                LayerKind::Maxpool2 => {
                    if shape.3 || shape.1 % 2 != 0 || shape.2 % 2 != 0 {
                        return bad(format!(
                            "layer {index}: maxpool2 needs even spatial extents, got {}x{}",
                            shape.1, shape.2
                        ));
                    }
                    shape = (shape.0, shape.1 / 2, shape.2 / 2, false);
                    group = shape.1 * shape.2;
                }
                LayerKind::Flatten => {
                    if shape.3 {
                        return bad(format!("layer {index}: repeated flatten"));
                    }
                    // channel identity survives flattening: element e belongs to unit e / group
                    shape = (shape.0 * shape.1 * shape.2, 1, 1, true);
                }
            }
            layers.push(LayerPlan {
                kind: *kind,
                in_len,
                out_len: shape.0 * shape.1 * shape.2,
                out_channels: shape.0,
                out_hw: (shape.1, shape.2),
                in_src,
                in_group,
                out_src: src,
                out_group: group,
                weighted: if kind.is_weighted() { Some(weighted.len() - 1) } else { None },
            });
        }
        for i in 0..weighted.len() {
            if let Some(s) = weighted[i].input_src {
                weighted[s].consumer = Some(i);
            }
        }
        Ok(Plan { input_len: c0 * h0 * w0, layers, weighted })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitRole {
    Conv(ConvGeometry),
    Dense,
    Output,
}

/// A layer that owns units and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLayer {
    /// Position in [`NetworkSpec::layers`].
    pub layer: usize,
    pub role: UnitRole,
    pub units: usize,
    /// Input channels (conv) or input features (dense/output).
    pub inputs: usize,
    /// Weighted layer whose units produced this layer's input; `None` for the network input.
    pub input_src: Option<usize>,
    /// Consecutive input elements per source unit.
    pub input_group: usize,
    /// Weighted layer reading this layer's units.
    pub consumer: Option<usize>,
}

impl WeightedLayer {
    /// Weights per unit: `inputs * k * k` for conv, `inputs` otherwise.
    pub fn fan_in(&self) -> usize {
        match self.role {
            UnitRole::Conv(g) => self.inputs * g.kernel * g.kernel,
            _ => self.inputs,
        }
    }

    /// Source unit of input channel/feature `i`, if it comes from a weighted layer.
    pub fn input_unit(&self, i: usize) -> Option<(usize, usize)> {
        let per = match self.role {
            UnitRole::Conv(_) => 1,
            _ => self.input_group,
        };
        self.input_src.map(|s| (s, i / per))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub kind: LayerKind,
    pub in_len: usize,
    pub out_len: usize,
    pub out_channels: usize,
    pub out_hw: (usize, usize),
    pub in_src: Option<usize>,
    pub in_group: usize,
    /// Weighted layer owning the output elements; `None` while still on the raw input.
    pub out_src: Option<usize>,
    pub out_group: usize,
    pub weighted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub input_len: usize,
    pub layers: Vec<LayerPlan>,
    pub weighted: Vec<WeightedLayer>,
}

impl Plan {
    pub fn output_layer(&self) -> usize {
        self.weighted.len() - 1
    }
}

/// Identifies a unit: weighted-layer index and unit index. Orders
/// lexicographically, which is the tie-break order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub unit: usize,
}

/// Subnet level of every unit, the single source of truth for all subnets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentTable {
    /// Number of subnets `N`.
    pub subnets: usize,
    /// Per weighted layer, per unit.
    pub levels: Vec<Vec<Level>>,
}

impl AssignmentTable {
    /// Everything in subnet 1.
    pub fn all_in_first(plan: &Plan, subnets: usize) -> Self {
        Self { subnets, levels: plan.weighted.iter().map(|w| vec![1; w.units]).collect() }
    }

    pub fn level(&self, id: UnitId) -> Level {
        self.levels[id.layer][id.unit]
    }

    /// Level of input element `i` of weighted layer `w` (raw input is level 1).
    pub fn input_level(&self, wl: &WeightedLayer, i: usize) -> Level {
        match wl.input_unit(i) {
            Some((s, u)) => self.levels[s][u],
            None => 1,
        }
    }

    pub fn excluded_level(&self) -> Level {
        self.subnets + 1
    }

    pub fn units_at(&self, level: Level) -> impl Iterator<Item = UnitId> + '_ {
        self.levels.iter().enumerate().flat_map(move |(l, lv)| {
            lv.iter()
                .enumerate()
                .filter(move |(_, &x)| x == level)
                .map(move |(u, _)| UnitId { layer: l, unit: u })
        })
    }

    pub fn matches(&self, plan: &Plan) -> Result<()> {
        if self.levels.len() != plan.weighted.len()
            || self.levels.iter().zip(&plan.weighted).any(|(l, w)| l.len() != w.units)
        {
            return Err(GraphError::Assignment("unit counts differ from the network".into()));
        }
        Ok(())
    }
}

/// Shared weights of all subnets.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Dense: `units x inputs`; conv: `filters x in_channels x k x k`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub layers: Vec<LayerParams>,
}

impl ParameterStore {
    /// He-initialised weights, zero biases.
    pub fn he(plan: &Plan, rng: &mut RngStream) -> Self {
        let layers = plan
            .weighted
            .iter()
            .map(|w| {
                let shape = match w.role {
                    UnitRole::Conv(g) => vec![w.units, w.inputs, g.kernel, g.kernel],
                    _ => vec![w.units, w.inputs],
                };
                LayerParams { weight: he_init(shape, w.fan_in(), rng), bias: Tensor::zeros(vec![w.units]) }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn matches(&self, plan: &Plan) -> Result<()> {
        if self.layers.len() != plan.weighted.len() {
            return Err(GraphError::Params("layer count differs".into()));
        }
        for (i, (p, w)) in self.layers.iter().zip(&plan.weighted).enumerate() {
            if p.weight.len() != w.units * w.fan_in() || p.bias.len() != w.units {
                return Err(GraphError::Params(format!("weighted layer {i} has the wrong size")));
            }
        }
        Ok(())
    }

    /// Values in checkpoint order: per layer, weights row-major then biases.
    pub fn flat_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
    }

    pub fn value_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Network, geometry, shared weights and unit levels, checked for consistency.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub plan: Plan,
    pub params: ParameterStore,
    pub assign: AssignmentTable,
}

impl Model {
    pub fn new(spec: NetworkSpec, params: ParameterStore, assign: AssignmentTable) -> Result<Self> {
        let plan = spec.plan()?;
        params.matches(&plan)?;
        assign.matches(&plan)?;
        Ok(Self { spec, plan, params, assign })
    }

    /// He-initialised model with every unit in subnet 1.
    pub fn initial(spec: NetworkSpec, subnets: usize, rng: &mut RngStream) -> Result<Self> {
        let plan = spec.plan()?;
        let params = ParameterStore::he(&plan, rng);
        let assign = AssignmentTable::all_in_first(&plan, subnets);
        Ok(Self { spec, plan, params, assign })
    }

    pub fn subnets(&self) -> usize {
        self.assign.subnets
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn mac_count(&self, k: Level) -> u64 {
        mac_count(&self.plan, &self.params, &self.assign, k)
    }

    pub fn mac_counts(&self) -> Vec<u64> {
        (1..=self.subnets()).map(|k| self.mac_count(k)).collect()
    }
}

/// Expands `original` by `ratio`, He-initialises it and puts every unit in subnet 1.
pub fn build_expanded(
    original: &NetworkSpec,
    ratio: f64,
    subnets: usize,
    rng: &mut RngStream,
) -> Result<(NetworkSpec, ParameterStore, AssignmentTable)> {
    let spec = original.expanded(ratio)?;
    let plan = spec.plan()?;
    let params = ParameterStore::he(&plan, rng);
    let assign = AssignmentTable::all_in_first(&plan, subnets);
    Ok((spec, params, assign))
}

/// Whether the synapse from a unit at `level_u` into a hidden unit at
/// `level_v` is active in subnet `k`.
pub fn synapse_active(level_u: Level, level_v: Level, k: Level) -> bool {
    level_u <= level_v && level_v <= k
}

/// First subnet in which a synapse from `level_u` into an output unit
/// counts; its contribution is kept in that level's output bucket.
pub fn output_contribution_level(level_u: Level) -> Level {
    level_u
}

/// Violations of the level representation.
pub fn validate(assign: &AssignmentTable, subnets: usize) -> Vec<String> {
    let mut out = Vec::new();
    let last = assign.levels.len().saturating_sub(1);
    for (l, levels) in assign.levels.iter().enumerate() {
        for (u, &lv) in levels.iter().enumerate() {
            if lv < 1 || lv > subnets + 1 {
                out.push(format!("unit {l}/{u} has level {lv} outside 1..={}", subnets + 1));
            } else if l == last && lv != 1 {
                out.push(format!("output unit {u} has level {lv}, must be 1"));
            }
        }
    }
    if assign.subnets != subnets {
        out.push(format!("table declares {} subnets, expected {subnets}", assign.subnets));
    }
    out
}

fn nonzero(ws: &[f32]) -> u64 {
    ws.iter().filter(|&&w| w != 0.0).count() as u64
}

/// Active nonzero incoming MACs of unit `u` of weighted layer `w`, as seen
/// in any subnet that contains it.
pub fn unit_incoming_macs(plan: &Plan, params: &ParameterStore, assign: &AssignmentTable, w: usize, u: usize) -> u64 {
    let wl = &plan.weighted[w];
    let weights = params.layers[w].weight.data();
    let lv = assign.levels[w][u];
    match wl.role {
        UnitRole::Conv(g) => {
            let kk = g.kernel * g.kernel;
            let mut n = 0;
            for c in 0..wl.inputs {
                if assign.input_level(wl, c) <= lv {
                    n += nonzero(&weights[(u * wl.inputs + c) * kk..][..kk]);
                }
            }
            n * g.out_positions() as u64
        }
        UnitRole::Dense => {
            let row = &weights[u * wl.inputs..(u + 1) * wl.inputs];
            (0..wl.inputs).filter(|&i| row[i] != 0.0 && assign.input_level(wl, i) <= lv).count() as u64
        }
        UnitRole::Output => 0,
    }
}

/// Nonzero classifier synapses whose source level is at most `k`.
fn output_macs(plan: &Plan, params: &ParameterStore, assign: &AssignmentTable, k: Level) -> u64 {
    let w = plan.output_layer();
    let wl = &plan.weighted[w];
    let weights = params.layers[w].weight.data();
    let mut n = 0;
    for i in 0..wl.inputs {
        if output_contribution_level(assign.input_level(wl, i)) <= k {
            n += (0..wl.units).filter(|&o| weights[o * wl.inputs + i] != 0.0).count() as u64;
        }
    }
    n
}

/// MACs executed by subnet `k`.
pub fn mac_count(plan: &Plan, params: &ParameterStore, assign: &AssignmentTable, k: Level) -> u64 {
    let mut total = 0;
    for (w, wl) in plan.weighted.iter().enumerate() {
        if wl.role == UnitRole::Output {
            continue;
        }
        for u in 0..wl.units {
            if assign.levels[w][u] <= k {
                total += unit_incoming_macs(plan, params, assign, w, u);
            }
        }
    }
    total + output_macs(plan, params, assign, k)
}

/// MACs of the network with every synapse present (no zeros, one subnet).
pub fn dense_mac_count(plan: &Plan) -> u64 {
    plan.weighted
        .iter()
        .map(|wl| {
            let per_unit = match wl.role {
                UnitRole::Conv(g) => (wl.fan_in() * g.out_positions()) as u64,
                _ => wl.inputs as u64,
            };
            per_unit * wl.units as u64
        })
        .sum()
}

/// MACs that leave subnet `level` when unit `id` (currently at `level`)
/// moves up one level: its own active incoming MACs plus its active
/// outgoing MACs into units of level at most `level`.
pub fn unit_move_macs(plan: &Plan, params: &ParameterStore, assign: &AssignmentTable, id: UnitId) -> u64 {
    let lu = assign.level(id);
    let mut total = unit_incoming_macs(plan, params, assign, id.layer, id.unit);
    let Some(next) = plan.weighted[id.layer].consumer else {
        return total;
    };
    let nl = &plan.weighted[next];
    let weights = params.layers[next].weight.data();
    let targets = |v: usize| nl.role == UnitRole::Output || synapse_active(lu, assign.levels[next][v], lu);
    match nl.role {
        UnitRole::Conv(g) => {
            let kk = g.kernel * g.kernel;
            for v in (0..nl.units).filter(|&v| targets(v)) {
                total += nonzero(&weights[(v * nl.inputs + id.unit) * kk..][..kk]) * g.out_positions() as u64;
            }
        }
        UnitRole::Dense | UnitRole::Output => {
            let per = nl.input_group;
            for v in (0..nl.units).filter(|&v| targets(v)) {
                let row = &weights[v * nl.inputs..(v + 1) * nl.inputs];
                total += nonzero(&row[id.unit * per..(id.unit + 1) * per]);
            }
        }
    }
    total
}
