//! Command implementations, configuration, checkpoints and CSV output.
//!
//! A checkpoint is a directory with `manifest.json` and `weights.bin`. The
//! weights file holds little-endian `f32` values, layer by layer in network
//! order, each layer's weight tensor (row-major) followed by its biases.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anytime::{AnytimeError, InferenceSession};
use crate::construct::{self, ConstructError, ConstructionConfig, ConstructionReport};
use crate::data::{self, DataError, Dataset, Normalization};
use crate::distill::{self, DistillConfig, DistillError};
use crate::engine::EngineError;
use crate::netgraph::{dense_mac_count, AssignmentTable, GraphError, Level, Model, NetworkSpec, ParameterStore};
use crate::tensor::RngStream;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Construct(#[from] ConstructError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Anytime(#[from] AnytimeError),
}

impl CliError {
    /// Stable category name used in the error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Contract(_) | CliError::Anytime(AnytimeError::Contract(_)) => "contract",
            CliError::Data(_) => "data",
            CliError::Graph(_) => "graph",
            CliError::Engine(_) | CliError::Anytime(AnytimeError::Engine(_)) => "engine",
            CliError::Construct(_) => "construct",
            CliError::Distill(_) => "distill",
        }
    }

    /// One-line JSON description of the failure.
    pub fn error_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub construct: ConstructSection,
    pub distill: DistillSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `lenet3c1l`, `lenet5` or `vgg16`.
    pub arch: String,
    pub expansion_ratio: f64,
    pub subnets: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { arch: "lenet3c1l".into(), expansion_ratio: 1.8, subnets: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `mnist` or `cifar10`.
    pub dataset: String,
    pub dir: PathBuf,
    /// Use only the first `n` training samples; 0 keeps all.
    pub train_limit: usize,
    /// Use only the first `n` held-out samples; 0 keeps all.
    pub test_limit: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dataset: "mnist".into(), dir: PathBuf::from("data/mnist-desk"), train_limit: 0, test_limit: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { epochs: 5, lr: 0.03, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructSection {
    /// Cumulative budgets as fractions of the unexpanded network's MACs.
    pub budgets: Vec<f64>,
    pub iterations: usize,
    pub batches_per_subnet: usize,
    /// `alpha_k = alpha_growth^(k-1)`.
    pub alpha_growth: f64,
    pub beta: f32,
    pub prune_threshold: f32,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for ConstructSection {
    fn default() -> Self {
        Self {
            budgets: vec![0.10, 0.30, 0.50, 0.85],
            iterations: 60,
            batches_per_subnet: 50,
            alpha_growth: 1.5,
            beta: 0.9,
            prune_threshold: 1e-5,
            lr: 0.03,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f32,
    pub beta: f32,
    pub batch_size: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self { gamma: 0.4, epochs: 5, lr: 0.01, beta: 0.9, batch_size: 16 }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Loads `path` (or the defaults) and applies command-line overrides.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>, dataset_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.run.seed = s;
        }
        if let Some(d) = dataset_dir {
            cfg.data.dir = d.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Derived seed for one purpose of a run; keeps streams independent.
fn stream(seed: u64, purpose: u64) -> RngStream {
    RngStream::new(seed).fork(purpose)
}

const SEED_TEACHER_INIT: u64 = 1;
const SEED_TEACHER_BATCHES: u64 = 2;
const SEED_STUDENT_INIT: u64 = 3;
const SEED_CONSTRUCT_BATCHES: u64 = 4;
const SEED_DISTILL_BATCHES: u64 = 5;

// ------------------------------------------------------------ checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `teacher`, `constructed` or `distilled`.
    pub stage: String,
    pub spec: NetworkSpec,
    /// The unexpanded network; its dense MAC count is the ratio denominator.
    pub original_spec: NetworkSpec,
    pub original_macs: u64,
    pub assignment: AssignmentTable,
    pub normalization: Normalization,
    pub config: Config,
    pub construction: Option<ConstructionConfig>,
    pub distillation: Option<DistillConfig>,
    pub seed: u64,
    /// SHA-256 of the teacher's weights file, for distilled checkpoints.
    pub teacher_sha256: Option<String>,
    pub weights_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(Model::new(self.manifest.spec.clone(), self.params.clone(), self.manifest.assignment.clone())?)
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.value_count() * 4);
        for v in self.params.flat_values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_model(model: &Model, mut manifest: Manifest) -> Self {
        manifest.spec = model.spec.clone();
        manifest.assignment = model.assign.clone();
        manifest.weights_bytes = (model.params.value_count() * 4) as u64;
        Self { manifest, params: model.params.clone() }
    }

    /// Parses a checkpoint from its two files' contents; `origin` names it in errors.
    pub fn from_parts(manifest_json: &str, weights: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| CliError::Checkpoint { path: origin.to_path_buf(), message };
        let value: serde_json::Value = serde_json::from_str(manifest_json).map_err(|e| bad(format!("bad manifest: {e}")))?;
        let version = value.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(FORMAT_VERSION as u64) {
            return Err(bad(format!("format version {version:?}, expected {FORMAT_VERSION}")));
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| bad(format!("bad manifest: {e}")))?;
        if weights.len() as u64 != manifest.weights_bytes {
            return Err(bad(format!(
                "weights file has {} bytes, manifest declares {}",
                weights.len(),
                manifest.weights_bytes
            )));
        }
        let plan = manifest.spec.plan()?;
        let mut params = ParameterStore::he(&plan, &mut RngStream::new(0)).zeros_like();
        if params.value_count() * 4 != weights.len() {
            return Err(bad(format!(
                "network needs {} bytes of weights, file has {}",
                params.value_count() * 4,
                weights.len()
            )));
        }
        let mut values = weights.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for layer in &mut params.layers {
            for v in layer.weight.data_mut().iter_mut().chain(layer.bias.data_mut().iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        manifest.assignment.matches(&plan)?;
        Ok(Self { manifest, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        let m = dir.join(MANIFEST_FILE);
        fs::write(&m, manifest + "\n").map_err(io_err(&m))?;
        let w = dir.join(WEIGHTS_FILE);
        fs::write(&w, self.weight_bytes()).map_err(io_err(&w))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = dir.join(MANIFEST_FILE);
        let w = dir.join(WEIGHTS_FILE);
        let manifest = fs::read_to_string(&m).map_err(io_err(&m))?;
        let weights = fs::read(&w).map_err(io_err(&w))?;
        Self::from_parts(&manifest, &weights, dir)
    }

    /// Hex SHA-256 of the weights file contents.
    pub fn weights_sha256(&self) -> String {
        Sha256::digest(self.weight_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mac_ratio(&self, model: &Model, level: Level) -> f64 {
        model.mac_count(level) as f64 / self.manifest.original_macs as f64
    }
}

// -------------------------------------------------------------------- CSV

/// One row of every metrics CSV. `step` is the construction iteration or
/// the training epoch; empty cells are written for missing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub step: usize,
    pub level: Level,
    pub mac_count: u64,
    pub mac_ratio_vs_original: f64,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Per-boundary movement log of a construction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub iteration: usize,
    pub boundary: Level,
    pub mac_level: u64,
    pub mac_previous: u64,
    pub budget: u64,
    pub budget_previous: u64,
    pub over_budget: bool,
    pub gate_open: bool,
    pub moved_units: usize,
    pub moved_macs: u64,
    pub pruned: usize,
}

/// One step of an anytime replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub input: usize,
    pub step: usize,
    pub op: String,
    pub level: Level,
    pub label: usize,
    pub prediction: usize,
    pub probability: f64,
    pub mac_meter: u64,
    pub mac_count_level: u64,
    pub path_independent: bool,
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, contents),
        None => {
            std::io::stdout().write_all(contents.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
            Ok(())
        }
    }
}

pub fn construction_rows(report: &ConstructionReport, original_macs: u64) -> (Vec<MetricsRow>, Vec<BoundaryRow>) {
    let mut metrics = Vec::new();
    let mut boundaries = Vec::new();
    for it in &report.iterations {
        for (i, b) in it.boundaries.iter().enumerate() {
            metrics.push(MetricsRow {
                phase: "construct".into(),
                step: it.iteration,
                level: b.level,
                mac_count: it.macs_after[i],
                mac_ratio_vs_original: it.macs_after[i] as f64 / original_macs as f64,
                loss: Some(it.losses[i]),
                accuracy: None,
            });
            boundaries.push(BoundaryRow {
                iteration: it.iteration,
                boundary: b.level,
                mac_level: it.macs[i],
                mac_previous: if i == 0 { 0 } else { it.macs[i - 1] },
                budget: report.budgets[i],
                budget_previous: if i == 0 { 0 } else { report.budgets[i - 1] },
                over_budget: b.over_budget,
                gate_open: b.gate_open,
                moved_units: b.moved_units,
                moved_macs: b.moved_macs,
                pruned: it.pruned,
            });
        }
    }
    (metrics, boundaries)
}

// --------------------------------------------------------------- commands

/// Training and held-out splits, standardised with `norm` or with
/// constants fitted on the training split.
pub fn load_data(cfg: &DataSection, norm: Option<&Normalization>) -> Result<(Dataset, Dataset, Normalization)> {
    let (mut train, mut test) = data::load_named(&cfg.dataset, &cfg.dir)?;
    if cfg.train_limit > 0 {
        train = train.take(cfg.train_limit);
    }
    if cfg.test_limit > 0 {
        test = test.take(cfg.test_limit);
    }
    let norm = norm.cloned().unwrap_or_else(|| Normalization::fit(&train));
    if norm.mean.len() != train.image_shape()[0] {
        return Err(CliError::Config(format!(
            "normalisation has {} channels, data {}",
            norm.mean.len(),
            train.image_shape()[0]
        )));
    }
    norm.apply(&mut train);
    norm.apply(&mut test);
    Ok((train, test, norm))
}

fn original_spec(cfg: &Config, train: &Dataset) -> Result<NetworkSpec> {
    Ok(NetworkSpec::by_name(&cfg.model.arch, train.image_shape(), train.classes)?)
}

/// What a command produced, for callers and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub metrics: Vec<MetricsRow>,
    /// Held-out accuracy per level at the end of the command.
    pub accuracy: Vec<f64>,
}

fn score_rows(phase: &str, step: usize, model: &Model, test: &Dataset, original_macs: u64) -> Result<(Vec<MetricsRow>, Vec<f64>)> {
    let scores = distill::evaluate_levels(model, test, 256)?;
    let rows = scores
        .iter()
        .enumerate()
        .map(|(i, s)| MetricsRow {
            phase: phase.into(),
            step,
            level: i + 1,
            mac_count: model.mac_count(i + 1),
            mac_ratio_vs_original: model.mac_count(i + 1) as f64 / original_macs as f64,
            loss: Some(s.loss),
            accuracy: Some(s.accuracy),
        })
        .collect();
    Ok((rows, scores.iter().map(|s| s.accuracy).collect()))
}

/// Trains the unexpanded network and writes it as a one-subnet checkpoint
/// plus `metrics.csv` to `out`.
pub fn cmd_pretrain_teacher(cfg: &Config, out: &Path) -> Result<Outcome> {
    let (train, test, norm) = load_data(&cfg.data, None)?;
    let spec = original_spec(cfg, &train)?;
    let original_macs = dense_mac_count(&spec.plan()?);
    let mut model = Model::initial(spec.clone(), 1, &mut stream(cfg.run.seed, SEED_TEACHER_INIT))?;
    let mut rng = stream(cfg.run.seed, SEED_TEACHER_BATCHES);
    let t = &cfg.teacher;
    if t.batch_size == 0 || !(t.lr > 0.0) {
        return Err(CliError::Config("teacher batch size and learning rate must be positive".into()));
    }
    let mut metrics = Vec::new();
    for epoch in 1..=t.epochs {
        let loss = distill::fit(&mut model, 1, &train, 1, t.lr, t.batch_size, &mut rng)?[0];
        metrics.push(MetricsRow {
            phase: "teacher-train".into(),
            step: epoch,
            level: 1,
            mac_count: model.mac_count(1),
            mac_ratio_vs_original: model.mac_count(1) as f64 / original_macs as f64,
            loss: Some(loss),
            accuracy: None,
        });
    }
    let (rows, accuracy) = score_rows("teacher-eval", t.epochs, &model, &test, original_macs)?;
    metrics.extend(rows);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: "teacher".into(),
        spec: spec.clone(),
        original_spec: spec,
        original_macs,
        assignment: model.assign.clone(),
        normalization: norm,
        config: cfg.clone(),
        construction: None,
        distillation: None,
        seed: cfg.run.seed,
        teacher_sha256: None,
        weights_bytes: 0,
    };
    Checkpoint::from_model(&model, manifest).save(out)?;
    write_file(&out.join("metrics.csv"), &csv_string(&metrics))?;
    Ok(Outcome { metrics, accuracy })
}

pub fn construction_config(cfg: &Config, original_macs: u64) -> ConstructionConfig {
    let c = &cfg.construct;
    ConstructionConfig {
        subnets: cfg.model.subnets,
        budgets: construct::budgets_from_fractions(&c.budgets, original_macs),
        iterations: c.iterations,
        batches_per_subnet: c.batches_per_subnet,
        alphas: construct::geometric_alphas(cfg.model.subnets, c.alpha_growth),
        beta: c.beta,
        prune_threshold: c.prune_threshold,
        base_lr: c.lr,
        seed: cfg.run.seed,
    }
}

/// Expands the original network, runs construction and writes the
/// checkpoint, `metrics.csv`, `construction_log.csv` and `report.json`.
pub fn cmd_construct(cfg: &Config, out: &Path) -> Result<(Outcome, ConstructionReport)> {
    let (train, test, norm) = load_data(&cfg.data, None)?;
    let original = original_spec(cfg, &train)?;
    let original_macs = dense_mac_count(&original.plan()?);
    let spec = original.expanded(cfg.model.expansion_ratio)?;
    let mut model = Model::initial(spec, cfg.model.subnets, &mut stream(cfg.run.seed, SEED_STUDENT_INIT))?;
    let ccfg = construction_config(cfg, original_macs);
    if cfg.construct.batch_size == 0 {
        return Err(CliError::Config("construction batch size must be positive".into()));
    }
    let mut batches = data::BatchStream::new(&train, cfg.construct.batch_size, stream(cfg.run.seed, SEED_CONSTRUCT_BATCHES));
    let report = construct::construct(&mut model, &ccfg, &mut batches)?;
    let (mut metrics, log) = construction_rows(&report, original_macs);
    let last = report.iterations.last().map_or(0, |it| it.iteration);
    let (rows, accuracy) = score_rows("construct-eval", last, &model, &test, original_macs)?;
    metrics.extend(rows);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: "constructed".into(),
        spec: model.spec.clone(),
        original_spec: original,
        original_macs,
        assignment: model.assign.clone(),
        normalization: norm,
        config: cfg.clone(),
        construction: Some(ccfg),
        distillation: None,
        seed: cfg.run.seed,
        teacher_sha256: None,
        weights_bytes: 0,
    };
    Checkpoint::from_model(&model, manifest).save(out)?;
    write_file(&out.join("metrics.csv"), &csv_string(&metrics))?;
    write_file(&out.join("construction_log.csv"), &csv_string(&log))?;
    write_file(&out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"))?;
    Ok((Outcome { metrics, accuracy }, report))
}

pub fn distill_config(cfg: &Config) -> DistillConfig {
    let d = &cfg.distill;
    DistillConfig {
        gamma: d.gamma,
        epochs: d.epochs,
        base_lr: d.lr,
        beta: d.beta,
        batch_size: d.batch_size,
        seed: RngStream::new(cfg.run.seed).fork(SEED_DISTILL_BATCHES).next_u64(),
    }
}

/// Retrains a constructed checkpoint against a teacher checkpoint. The
/// `[distill]` section and seed come from `cfg`; data and normalisation
/// from the constructed checkpoint (with `cfg.data.dir` as the location).
pub fn cmd_distill(student_dir: &Path, teacher_dir: &Path, cfg: &Config, out: &Path) -> Result<Outcome> {
    let student = Checkpoint::load(student_dir)?;
    let teacher = Checkpoint::load(teacher_dir)?;
    if teacher.manifest.spec.classes() != student.manifest.spec.classes() {
        return Err(CliError::Distill(DistillError::Teacher(format!(
            "teacher has {} classes, student {}",
            teacher.manifest.spec.classes(),
            student.manifest.spec.classes()
        ))));
    }
    if teacher.manifest.normalization != student.manifest.normalization {
        return Err(CliError::Distill(DistillError::Teacher("teacher and student were standardised differently".into())));
    }
    let mut data_cfg = student.manifest.config.data.clone();
    data_cfg.dir = cfg.data.dir.clone();
    let (train, test, norm) = load_data(&data_cfg, Some(&student.manifest.normalization))?;
    let mut model = student.model()?;
    let teacher_model = teacher.model()?;
    let dcfg = distill_config(cfg);
    let original_macs = student.manifest.original_macs;
    let records = distill::retrain(&mut model, &teacher_model, &dcfg, &train, Some(&test))?;
    let mut metrics: Vec<MetricsRow> = records
        .iter()
        .map(|r| MetricsRow {
            phase: "distill".into(),
            step: r.epoch,
            level: r.level,
            mac_count: model.mac_count(r.level),
            mac_ratio_vs_original: model.mac_count(r.level) as f64 / original_macs as f64,
            loss: Some(r.loss),
            accuracy: r.accuracy,
        })
        .collect();
    let accuracy = if records.is_empty() {
        let (rows, acc) = score_rows("distill-eval", 0, &model, &test, original_macs)?;
        metrics.extend(rows);
        acc
    } else {
        let last = dcfg.epochs;
        records.iter().filter(|r| r.epoch == last).map(|r| r.accuracy.unwrap_or(f64::NAN)).collect()
    };
    let checkpoint = if dcfg.epochs == 0 {
        // nothing trained: the input is passed through untouched
        student.clone()
    } else {
        let mut manifest = student.manifest.clone();
        manifest.stage = "distilled".into();
        manifest.distillation = Some(dcfg);
        manifest.teacher_sha256 = Some(teacher.weights_sha256());
        manifest.normalization = norm;
        manifest.seed = cfg.run.seed;
        Checkpoint::from_model(&model, manifest)
    };
    checkpoint.save(out)?;
    write_file(&out.join("metrics.csv"), &csv_string(&metrics))?;
    Ok(Outcome { metrics, accuracy })
}

/// `"1,2,4"` to levels; empty means every level.
pub fn parse_levels(text: Option<&str>, subnets: usize) -> Result<Vec<Level>> {
    let Some(text) = text.filter(|t| !t.trim().is_empty()) else {
        return Ok((1..=subnets).collect());
    };
    let mut out = Vec::new();
    for part in text.split(',') {
        let l: Level = part.trim().parse().map_err(|_| CliError::Config(format!("bad level `{part}`")))?;
        if l < 1 || l > subnets {
            return Err(CliError::Config(format!("level {l} outside 1..={subnets}")));
        }
        out.push(l);
    }
    Ok(out)
}

/// Per-level accuracy table of a checkpoint on its held-out split.
pub fn cmd_eval(dir: &Path, levels: Option<&str>, dataset_dir: Option<&Path>, out: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let ck = Checkpoint::load(dir)?;
    let model = ck.model()?;
    let levels = parse_levels(levels, model.subnets())?;
    let mut data_cfg = ck.manifest.config.data.clone();
    if let Some(d) = dataset_dir {
        data_cfg.dir = d.to_path_buf();
    }
    let (_, test, _) = load_data(&data_cfg, Some(&ck.manifest.normalization))?;
    let (rows, _) = score_rows("eval", 0, &model, &test, ck.manifest.original_macs)?;
    let rows: Vec<MetricsRow> = levels.iter().map(|&l| rows[l - 1].clone()).collect();
    emit(out, &csv_string(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Start,
    Expand,
    Reduce,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Start => "start",
            Op::Expand => "expand",
            Op::Reduce => "reduce",
        }
    }
}

/// Schedule entries `step:level` (operation implied by the direction) or
/// `step:op:level`, comma separated, with strictly increasing steps; the
/// first entry starts the session.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, Op, Level)>> {
    let bad = |m: String| CliError::Config(format!("bad schedule: {m}"));
    let mut out: Vec<(usize, Op, Level)> = Vec::new();
    for entry in text.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let fields: Vec<&str> = entry.split(':').collect();
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("`{entry}`")));
        let (step, op, level) = match fields.as_slice() {
            [s, l] => {
                let level = num(l)?;
                let op = match out.last() {
                    None => Op::Start,
                    Some(&(_, _, prev)) if level > prev => Op::Expand,
                    Some(_) => Op::Reduce,
                };
                (num(s)?, op, level)
            }
            [s, o, l] => {
                let op = match o.trim() {
                    "start" => Op::Start,
                    "expand" => Op::Expand,
                    "reduce" => Op::Reduce,
                    other => return Err(bad(format!("unknown operation `{other}`"))),
                };
                (num(s)?, op, num(l)?)
            }
            _ => return Err(bad(format!("`{entry}`"))),
        };
        if let Some(&(prev, _, _)) = out.last() {
            if step <= prev {
                return Err(bad(format!("step {step} does not follow {prev}")));
            }
        }
        if (op == Op::Start) != out.is_empty() {
            return Err(bad("exactly the first entry must start the session".into()));
        }
        out.push((step, op, level));
    }
    if out.is_empty() {
        return Err(bad("empty".into()));
    }
    Ok(out)
}

/// Replays `schedule` on the first `inputs` held-out samples, checking every
/// step against a fresh evaluation at the same level.
pub fn cmd_anytime_demo(
    dir: &Path,
    schedule: &str,
    inputs: usize,
    dataset_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<Vec<TraceRow>> {
    let ck = Checkpoint::load(dir)?;
    let model = ck.model()?;
    let schedule = parse_schedule(schedule)?;
    let mut data_cfg = ck.manifest.config.data.clone();
    data_cfg.test_limit = inputs;
    if let Some(d) = dataset_dir {
        data_cfg.dir = d.to_path_buf();
    }
    let (_, test, _) = load_data(&data_cfg, Some(&ck.manifest.normalization))?;
    let rows = anytime_trace(&model, &test, &schedule)?;
    emit(out, &csv_string(&rows))?;
    let violations = rows.iter().filter(|r| !r.path_independent).count();
    if violations > 0 {
        return Err(CliError::Contract(format!("{violations} path-independence violations")));
    }
    Ok(rows)
}

pub fn anytime_trace(model: &Model, data: &Dataset, schedule: &[(usize, Op, Level)]) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for i in 0..data.len() {
        let x = data.image(i);
        let (_, first_op, first_level) = schedule[0];
        debug_assert_eq!(first_op, Op::Start);
        let (mut session, _) = InferenceSession::start(model, x, first_level)?;
        for &(step, op, level) in schedule {
            match op {
                Op::Start => {}
                Op::Expand => {
                    session.expand(level)?;
                }
                Op::Reduce => {
                    session.reduce(level)?;
                }
            }
            let (prediction, p) = session.predict();
            let fresh = InferenceSession::start(model, x, level)?.1;
            rows.push(TraceRow {
                input: i,
                step,
                op: op.name().into(),
                level,
                label: data.labels[i],
                prediction,
                probability: p[prediction],
                mac_meter: session.meter(),
                mac_count_level: model.mac_count(level),
                path_independent: fresh == p,
            });
        }
    }
    Ok(rows)
}
