//! Subnet construction by gradual unit movement.
//!
//! Subnet 1 starts as the whole expanded network. Each iteration trains
//! every subnet for `m` batches (ascending), measures the MACs of every
//! subnet, moves the least important units of each over-budget subnet one
//! level up (subject to gating), and zeroes small weights without freezing
//! them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BatchSource;
use crate::engine::{self, EngineError, ImportanceLedger};
use crate::netgraph::{unit_move_macs, validate, AssignmentTable, Level, Model, ParameterStore, UnitId, UnitRole};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructError {
    #[error("invalid construction config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, ConstructError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionConfig {
    pub subnets: usize,
    /// Cumulative MAC budgets `P_1 < ... < P_N`.
    pub budgets: Vec<u64>,
    /// Iteration cap `N_t`.
    pub iterations: usize,
    /// Training batches per subnet per iteration (`m`).
    pub batches_per_subnet: usize,
    /// Criterion weights `alpha_1..alpha_N`.
    pub alphas: Vec<f64>,
    /// Learning-rate suppression base; 1 disables suppression.
    pub beta: f32,
    pub prune_threshold: f32,
    pub base_lr: f32,
    pub seed: u64,
}

impl ConstructionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConstructError::Config(m));
        if self.subnets == 0 {
            return bad("at least one subnet is required".into());
        }
        if self.budgets.len() != self.subnets || self.alphas.len() != self.subnets {
            return bad(format!(
                "{} subnets need {0} budgets and {0} alphas, got {} and {}",
                self.subnets,
                self.budgets.len(),
                self.alphas.len()
            ));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("budgets must increase strictly: {:?}", self.budgets));
        }
        if self.iterations == 0 || self.batches_per_subnet == 0 {
            return bad("iterations and batches per subnet must be at least 1".into());
        }
        if self.alphas.iter().any(|&a| !(a > 0.0)) {
            return bad(format!("alphas must be positive: {:?}", self.alphas));
        }
        if !(self.prune_threshold >= 0.0) {
            return bad(format!("prune threshold must be >= 0, got {}", self.prune_threshold));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.base_lr));
        }
        Ok(())
    }
}

/// `alpha_1 = 1`, each larger subnet `growth` times the previous.
pub fn geometric_alphas(subnets: usize, growth: f64) -> Vec<f64> {
    (0..subnets).map(|k| growth.powi(k as i32)).collect()
}

/// Absolute budgets from fractions of the original network's MACs (rounded down).
pub fn budgets_from_fractions(fractions: &[f64], original_macs: u64) -> Vec<u64> {
    fractions.iter().map(|f| (f * original_macs as f64).floor() as u64).collect()
}

/// MACs moved across a boundary per iteration: `ceil((P_t - P_1) / N_t)`.
pub fn movement_quantum(total: u64, first_budget: u64, iterations: usize) -> Result<u64> {
    if total <= first_budget {
        return Err(ConstructError::Config(format!(
            "network MACs {total} already within the first budget {first_budget}"
        )));
    }
    if iterations == 0 {
        return Err(ConstructError::Config("zero iterations".into()));
    }
    Ok((total - first_budget).div_ceil(iterations as u64))
}

/// Whether units may flow out of subnet `i` (1-based): subnet 1 must exceed
/// its budget; a larger subnet must exceed the previous one by more than
/// the budget gap.
pub fn gate(i: Level, macs: &[u64], budgets: &[u64]) -> bool {
    if i == 1 {
        macs[0] > budgets[0]
    } else {
        (macs[i - 1] as i128 - macs[i - 2] as i128) > (budgets[i - 1] as i128 - budgets[i - 2] as i128)
    }
}

/// `M_j^i = sum_{k=i}^{N} alpha_k * mean|dL_k / dr_j^k|`.
pub fn criterion(ledger: &ImportanceLedger, id: UnitId, level: Level, alphas: &[f64]) -> f64 {
    (level..=alphas.len()).map(|k| alphas[k - 1] * ledger.mean(id, k)).sum()
}

/// Least important hidden units of `level`, taken in ascending criterion
/// order (ties by unit id) until their MAC reduction reaches `quantum`.
/// A unit is skipped when it is the last one of its layer inside subnet
/// `level`, so no subnet ever loses a whole layer.
pub fn select_movers(
    model: &Model,
    ledger: &ImportanceLedger,
    level: Level,
    alphas: &[f64],
    quantum: u64,
) -> Vec<UnitId> {
    let output = model.plan.output_layer();
    let mut ranked: Vec<(f64, UnitId)> = model
        .assign
        .units_at(level)
        .filter(|id| id.layer != output)
        .map(|id| (criterion(ledger, id, level, alphas), id))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut members: Vec<usize> =
        model.assign.levels.iter().map(|l| l.iter().filter(|&&lv| lv <= level).count()).collect();
    let mut moved = 0u64;
    let mut out = Vec::new();
    for (_, id) in ranked {
        if moved >= quantum {
            break;
        }
        if members[id.layer] <= 1 {
            continue;
        }
        members[id.layer] -= 1;
        moved += unit_move_macs(&model.plan, &model.params, &model.assign, id);
        out.push(id);
    }
    out
}

/// Raises every mover from `level` to `level + 1`.
pub fn apply_move(assign: &mut AssignmentTable, movers: &[UnitId], level: Level) -> Result<()> {
    for &id in movers {
        let l = assign.level(id);
        if l != level {
            return Err(ConstructError::Contract(format!("unit {id:?} is at level {l}, not {level}")));
        }
        if l > assign.subnets {
            return Err(ConstructError::Contract(format!("unit {id:?} is already excluded")));
        }
    }
    for &id in movers {
        assign.levels[id.layer][id.unit] += 1;
    }
    Ok(())
}

/// Zeroes every weight with `|w| < threshold`; returns how many were nonzero before.
/// Biases are left alone and zeroed weights stay trainable.
pub fn prune(params: &mut ParameterStore, threshold: f32) -> usize {
    let mut n = 0;
    for layer in &mut params.layers {
        for w in layer.weight.data_mut() {
            if *w != 0.0 && w.abs() < threshold {
                *w = 0.0;
                n += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    /// Source level of the boundary (`N` moves into the excluded pool).
    pub level: Level,
    pub over_budget: bool,
    pub gate_open: bool,
    pub moved_units: usize,
    pub moved_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean training loss per subnet over the iteration's batches.
    pub losses: Vec<f64>,
    /// Per-subnet MACs after training, the values the gates saw.
    pub macs: Vec<u64>,
    pub boundaries: Vec<BoundaryRecord>,
    pub pruned: usize,
    /// Per-subnet MACs after movement and pruning.
    pub macs_after: Vec<u64>,
    /// Every unit level after this iteration.
    pub levels: Vec<Vec<Level>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    /// MACs of the expanded network at the start (`P_t`).
    pub initial_macs: u64,
    pub budgets: Vec<u64>,
    pub quantum: Option<u64>,
    pub iterations: Vec<IterationRecord>,
    pub final_macs: Vec<u64>,
    pub budgets_met: bool,
    /// Validation failures seen after any iteration; empty on a sound run.
    pub violations: Vec<String>,
}

/// Runs the construction loop on `model` in place.
pub fn construct(model: &mut Model, config: &ConstructionConfig, data: &mut dyn BatchSource) -> Result<ConstructionReport> {
    config.validate()?;
    if model.subnets() != config.subnets {
        return Err(ConstructError::Config(format!(
            "model has {} subnets, config {}",
            model.subnets(),
            config.subnets
        )));
    }
    let n = config.subnets;
    let within = |macs: &[u64]| macs.iter().zip(&config.budgets).all(|(m, p)| m <= p);
    let initial_macs = model.mac_count(1);
    let quantum = if initial_macs > config.budgets[0] {
        Some(movement_quantum(initial_macs, config.budgets[0], config.iterations)?)
    } else {
        None
    };
    let mut ledger = ImportanceLedger::new(model);
    let mut report = ConstructionReport {
        initial_macs,
        budgets: config.budgets.clone(),
        quantum,
        iterations: Vec::new(),
        final_macs: Vec::new(),
        budgets_met: false,
        violations: Vec::new(),
    };

    for iteration in 1..=config.iterations {
        ledger.reset();
        let mut losses = Vec::with_capacity(n);
        for level in 1..=n {
            let mut total = 0.0;
            for _ in 0..config.batches_per_subnet {
                let (x, y) = data.next_batch();
                let acts = engine::forward(model, level, &x, None)?;
                total += engine::cross_entropy(acts.logits(), &y, model.classes())?;
                let grads = engine::backward(model, &acts, &y)?;
                ledger.record(&grads);
                engine::sgd_step(model, &grads, config.base_lr, config.beta)?;
            }
            losses.push(total / config.batches_per_subnet as f64);
        }

        let macs = model.mac_counts();
        let mut boundaries = Vec::with_capacity(n);
        let mut moves = Vec::new();
        for level in 1..=n {
            let over_budget = macs[level - 1] > config.budgets[level - 1];
            let gate_open = gate(level, &macs, &config.budgets);
            let mut record = BoundaryRecord { level, over_budget, gate_open, moved_units: 0, moved_macs: 0 };
            if over_budget && gate_open {
                if let Some(q) = quantum {
                    // never carve deeper than the remaining surplus
                    let q = q.min(macs[level - 1] - config.budgets[level - 1]);
                    let movers = select_movers(model, &ledger, level, &config.alphas, q);
                    record.moved_units = movers.len();
                    record.moved_macs = movers
                        .iter()
                        .map(|&id| unit_move_macs(&model.plan, &model.params, &model.assign, id))
                        .sum();
                    moves.push((level, movers));
                }
            }
            boundaries.push(record);
        }
        for (level, movers) in &moves {
            apply_move(&mut model.assign, movers, *level)?;
        }
        let pruned = prune(&mut model.params, config.prune_threshold);
        report.violations.extend(validate(&model.assign, n).into_iter().map(|v| format!("iteration {iteration}: {v}")));
        let macs_after = model.mac_counts();
        let done = within(&macs) || within(&macs_after);
        report.iterations.push(IterationRecord {
            iteration,
            losses,
            macs,
            boundaries,
            pruned,
            macs_after,
            levels: model.assign.levels.clone(),
        });
        if done {
            break;
        }
    }
    report.final_macs = model.mac_counts();
    report.budgets_met = within(&report.final_macs);
    Ok(report)
}

/// Hidden units per level, for reporting: `[layer][level - 1]`.
pub fn units_per_level(model: &Model) -> Vec<Vec<usize>> {
    model
        .plan
        .weighted
        .iter()
        .enumerate()
        .filter(|(_, w)| w.role != UnitRole::Output)
        .map(|(l, _)| {
            let mut counts = vec![0; model.subnets() + 1];
            for &lv in &model.assign.levels[l] {
                counts[lv - 1] += 1;
            }
            counts
        })
        .collect()
}

/// The small flow example: 2 inputs, hidden layers of 4 and 3 neurons,
/// 2 classes (26 dense MACs), three subnets with budgets 3, 7 and 14 MACs
/// and a cap of 23 iterations, with a linearly separable data set.
pub fn gating_toy(seed: u64) -> (Model, ConstructionConfig, crate::data::Dataset) {
    use crate::netgraph::{LayerKind, NetworkSpec};
    use crate::tensor::{RngStream, Tensor};
    let spec = NetworkSpec::checked(
        [2, 1, 1],
        vec![
            LayerKind::Dense { units: 4 },
            LayerKind::Relu,
            LayerKind::Dense { units: 3 },
            LayerKind::Relu,
            LayerKind::Output { classes: 2 },
        ],
    )
    .expect("toy spec");
    let mut rng = RngStream::new(seed);
    let model = Model::initial(spec, 3, &mut rng.fork(1)).expect("toy model");
    let n = 256;
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b) = (rng.next_normal() as f32, rng.next_normal() as f32);
        xs.extend([a, b]);
        ys.push(usize::from(a + 0.5 * b > 0.0));
    }
    let data = crate::data::Dataset::new(Tensor::new(vec![n, 2, 1, 1], xs).expect("toy data"), ys, 2).expect("toy data");
    let config = ConstructionConfig {
        subnets: 3,
        budgets: vec![3, 7, 14],
        iterations: 23,
        batches_per_subnet: 4,
        alphas: geometric_alphas(3, 1.5),
        beta: 0.9,
        prune_threshold: 1e-5,
        base_lr: 0.05,
        seed,
    };
    (model, config, data)
}
