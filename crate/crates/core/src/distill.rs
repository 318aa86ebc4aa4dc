//! Retraining of constructed subnets against a pretrained teacher.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{epoch_batches, Dataset};
use crate::engine::{self, EngineError};
use crate::netgraph::{Level, Model};
use crate::tensor::{RngStream, Tensor};

/// Lower bound on probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("teacher mismatch: {0}")]
    Teacher(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the label cross-entropy; `1 - gamma` weighs the teacher term.
    pub gamma: f64,
    pub epochs: usize,
    pub base_lr: f32,
    pub beta: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// `sum_k p_k * ln(p_k / q_k) - p_k + q_k` for teacher `p` and student `q`,
/// both floored at [`PROB_FLOOR`]. For normalised distributions this is the
/// usual divergence; the extra `q - p` keeps every term non-negative even
/// when the floor lifts a total above one.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pk, &qk)| {
            let (pk, qk) = (pk.max(PROB_FLOOR), qk.max(PROB_FLOOR));
            let term = pk * (pk.ln() - qk.ln()) - pk + qk;
            // rounding can leave a term of a near-equal pair a hair below zero
            term.max(0.0)
        })
        .sum()
}

fn check_shapes(student: &[f32], teacher: &[f32], labels: &[usize], classes: usize) -> Result<()> {
    if classes == 0 || student.len() != labels.len() * classes || teacher.len() != student.len() {
        return Err(DistillError::Teacher(format!(
            "{} student and {} teacher logits for {} labels of {classes} classes",
            student.len(),
            teacher.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Batch mean of `gamma * CE(student, labels) + (1 - gamma) * KL(teacher || student)`.
pub fn kd_loss(student: &[f32], teacher: &[f32], labels: &[usize], classes: usize, gamma: f64) -> Result<f64> {
    check_shapes(student, teacher, labels, classes)?;
    let ce = engine::cross_entropy(student, labels, classes)?;
    if gamma == 1.0 {
        return Ok(ce);
    }
    let q = engine::softmax(student, classes);
    let p = engine::softmax(teacher, classes);
    let kl: f64 = p.chunks(classes).zip(q.chunks(classes)).map(|(p, q)| kl_divergence(p, q)).sum();
    Ok(gamma * ce + (1.0 - gamma) * kl / labels.len() as f64)
}

/// Gradient of [`kd_loss`] with respect to the student logits:
/// `(gamma * (q - onehot) + (1 - gamma) * (q - p)) / B`.
pub fn kd_loss_grad(student: &[f32], teacher: &[f32], labels: &[usize], classes: usize, gamma: f64) -> Result<Vec<f32>> {
    check_shapes(student, teacher, labels, classes)?;
    if gamma == 1.0 {
        return Ok(engine::cross_entropy_grad(student, labels, classes));
    }
    let n = labels.len() as f64;
    let q = engine::softmax(student, classes);
    let p = engine::softmax(teacher, classes);
    let mut g = Vec::with_capacity(q.len());
    for (i, (&qk, &pk)) in q.iter().zip(&p).enumerate() {
        let onehot = if labels[i / classes] == i % classes { 1.0 } else { 0.0 };
        g.push(((gamma * (qk - onehot) + (1.0 - gamma) * (qk - pk)) / n) as f32);
    }
    Ok(g)
}

/// Logits of a single-subnet model for every sample, computed in chunks.
pub fn predict_logits(model: &Model, level: Level, data: &Dataset, chunk: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(data.len() * model.classes());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, _) = data.gather(part);
        out.extend_from_slice(engine::forward(model, level, &x, None)?.logits());
    }
    Ok(out)
}

/// Accuracy and mean cross-entropy of one subnet on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub accuracy: f64,
    pub loss: f64,
}

/// Scores of every subnet level `1..=N`, one cached pass per chunk.
pub fn evaluate_levels(model: &Model, data: &Dataset, chunk: usize) -> Result<Vec<LevelScore>> {
    let n = model.subnets();
    let classes = model.classes();
    let mut correct = vec![0usize; n];
    let mut loss = vec![0.0f64; n];
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = data.gather(part);
        let mut acts = engine::forward(model, 1, &x, None)?;
        for k in 1..=n {
            if k > 1 {
                engine::extend(model, &mut acts, k)?;
            }
            let pred = engine::argmax_rows(acts.logits(), classes);
            correct[k - 1] += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
            loss[k - 1] += engine::cross_entropy(acts.logits(), &y, classes)? * part.len() as f64;
        }
    }
    let total = data.len().max(1) as f64;
    Ok(correct.into_iter().zip(loss).map(|(c, l)| LevelScore { accuracy: c as f64 / total, loss: l / total }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub level: Level,
    pub loss: f64,
    /// Held-out accuracy after the epoch, if an evaluation set was given.
    pub accuracy: Option<f64>,
}

/// Per epoch and level `i = 1..N` (ascending): one shuffled pass over
/// `train` with [`kd_loss`] at subnet `i` and suppression `beta^(j - i)`.
/// The assignment table is never touched.
pub fn retrain(
    model: &mut Model,
    teacher: &Model,
    config: &DistillConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if teacher.classes() != model.classes() {
        return Err(DistillError::Teacher(format!(
            "teacher has {} classes, student {}",
            teacher.classes(),
            model.classes()
        )));
    }
    if teacher.plan.input_len != model.plan.input_len {
        return Err(DistillError::Teacher(format!(
            "teacher expects {} input values, student {}",
            teacher.plan.input_len, model.plan.input_len
        )));
    }
    let classes = model.classes();
    let teacher_logits = if config.gamma < 1.0 && config.epochs > 0 {
        predict_logits(teacher, teacher.subnets(), train, 256)?
    } else {
        Vec::new()
    };
    let mut rng = RngStream::new(config.seed);
    let mut records = Vec::new();
    for epoch in 1..=config.epochs {
        let mut losses = Vec::with_capacity(model.subnets());
        for level in 1..=model.subnets() {
            let mut total = 0.0;
            let batches = epoch_batches(train.len(), config.batch_size, &mut rng);
            for idx in &batches {
                let (x, y) = train.gather(idx);
                let acts = engine::forward(model, level, &x, None)?;
                let t: Vec<f32> = if teacher_logits.is_empty() {
                    vec![0.0; idx.len() * classes]
                } else {
                    idx.iter().flat_map(|&i| teacher_logits[i * classes..(i + 1) * classes].iter().copied()).collect()
                };
                total += kd_loss(acts.logits(), &t, &y, classes, config.gamma)?;
                let g = kd_loss_grad(acts.logits(), &t, &y, classes, config.gamma)?;
                let grads = engine::backward_from_logits(model, &acts, &g)?;
                engine::sgd_step(model, &grads, config.base_lr, config.beta)?;
            }
            losses.push(total / batches.len() as f64);
        }
        let acc = eval.map(|d| evaluate_levels(model, d, 256)).transpose()?;
        for (i, loss) in losses.into_iter().enumerate() {
            records.push(EpochRecord { epoch, level: i + 1, loss, accuracy: acc.as_ref().map(|a| a[i].accuracy) });
        }
    }
    Ok(records)
}

/// Plain supervised training of subnet `level` (the teacher uses level 1 of a one-subnet model).
pub fn fit(
    model: &mut Model,
    level: Level,
    data: &Dataset,
    epochs: usize,
    base_lr: f32,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let batches = epoch_batches(data.len(), batch_size, rng);
        let mut total = 0.0;
        for idx in &batches {
            let (x, y): (Tensor, Vec<usize>) = data.gather(idx);
            let acts = engine::forward(model, level, &x, None)?;
            total += engine::cross_entropy(acts.logits(), &y, model.classes())?;
            let grads = engine::backward(model, &acts, &y)?;
            engine::sgd_step(model, &grads, base_lr, 1.0)?;
        }
        losses.push(total / batches.len().max(1) as f64);
    }
    Ok(losses)
}
