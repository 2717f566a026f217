//! Session-by-session few-shot class-incremental protocol.
//!
//! Session 0 is the base task: its classes are revealed, its test set is
//! streamed through the scorer and the base cache fills up. Each later
//! session reveals new classes, stores their K shots in the novel cache, and
//! streams the union of every test set seen so far in a seeded shuffled
//! order. Every sample is predicted before any attempt to cache it.
//!
//! The relation scorer is trained at most once per experiment, before the
//! first session, and is never touched afterwards. Because it is frozen, its
//! logits for every test sample against every prototype are computed once
//! up front and shared by all trials and sweep values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptor::{
    pseudo_label, predict_with_scores, BaseUpdatePolicy, CacheError, DualCache, DEFAULT_ALPHA,
    DEFAULT_BETA, DEFAULT_CAPACITY, DEFAULT_SHOTS,
};
use crate::alignment::{
    init_relation_with, logits_matrix, train_alignment, AlignmentError, RelationParams,
    SimilarityVector, TrainConfig, DEFAULT_HIDDEN,
};
use crate::embedding::{ClassId, EmbeddingSet, PrototypeSet, Split, SynthConfig};
use crate::metrics::{
    accuracy, harmonic, split_accuracy, AlignmentSummary, ClassTally, ExperimentReport,
    MetricsError, SessionReport, TrialReport,
};
use crate::rng::{derive_seed, SplitMix64};

/// Substream of the experiment seed used to initialize the scorer.
pub const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("no tasks")]
    NoTasks,
    #[error("class {class} belongs to both task {first} and task {second}")]
    DisjointnessViolation {
        class: ClassId,
        first: usize,
        second: usize,
    },
    #[error("task {task} class {class} has {found} training shots, expected {expected}")]
    ShotCountMismatch {
        task: usize,
        class: ClassId,
        found: usize,
        expected: usize,
    },
    #[error("task {task}: {reason}")]
    InvalidTask { task: usize, reason: String },
    #[error("session {got} cannot follow session {after:?}")]
    OutOfOrderSession { after: Option<usize>, got: usize },
    #[error("no prototype for class {0}")]
    MissingPrototype(ClassId),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A record index together with its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub record: usize,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    /// Sorted class ids introduced by this task.
    pub classes: Vec<ClassId>,
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    /// Shots per class; `None` for the base task.
    pub shots: Option<usize>,
}

/// Groups an embedding set into tasks by its task field. Task indices must run
/// `0..T` without gaps. A task's classes are the labels of its train records.
pub fn tasks_from_set(set: &EmbeddingSet, shots: usize) -> Result<Vec<TaskSpec>, ProtocolError> {
    let ids = set.tasks();
    if ids.is_empty() {
        return Err(ProtocolError::NoTasks);
    }
    let mut tasks = Vec::with_capacity(ids.len());
    for (index, &id) in ids.iter().enumerate() {
        if id as usize != index {
            return Err(ProtocolError::InvalidTask {
                task: id as usize,
                reason: format!("task ids must be contiguous from 0, found {id} at position {index}"),
            });
        }
        let refs = |split| {
            set.partition(id, split)
                .into_iter()
                .map(|record| SampleRef {
                    record,
                    label: set.records()[record].label,
                })
                .collect::<Vec<_>>()
        };
        let train = refs(Split::Train);
        let test = refs(Split::Test);
        let classes: BTreeSet<ClassId> = train.iter().map(|r| r.label).collect();
        tasks.push(TaskSpec {
            index,
            classes: classes.into_iter().collect(),
            train,
            test,
            shots: (index > 0).then_some(shots),
        });
    }
    Ok(tasks)
}

/// Checks label-space disjointness, shot counts, and that every sample
/// belongs to its task's classes.
pub fn validate_tasks(tasks: &[TaskSpec]) -> Result<(), ProtocolError> {
    if tasks.is_empty() {
        return Err(ProtocolError::NoTasks);
    }
    let mut owner: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (pos, task) in tasks.iter().enumerate() {
        if task.index != pos {
            return Err(ProtocolError::InvalidTask {
                task: task.index,
                reason: format!("listed at position {pos}"),
            });
        }
        if task.classes.is_empty() {
            return Err(ProtocolError::InvalidTask {
                task: pos,
                reason: "no classes".into(),
            });
        }
        for &c in &task.classes {
            if let Some(&first) = owner.get(&c) {
                return Err(ProtocolError::DisjointnessViolation {
                    class: c,
                    first,
                    second: pos,
                });
            }
            owner.insert(c, pos);
        }
        let own: BTreeSet<ClassId> = task.classes.iter().copied().collect();
        if let Some(r) = task.train.iter().chain(&task.test).find(|r| !own.contains(&r.label)) {
            return Err(ProtocolError::InvalidTask {
                task: pos,
                reason: format!("record {} has label {} outside the task", r.record, r.label),
            });
        }
        if pos > 0 {
            let expected = task.shots.ok_or_else(|| ProtocolError::InvalidTask {
                task: pos,
                reason: "novel task without a shot count".into(),
            })?;
            let mut counts: BTreeMap<ClassId, usize> = task.classes.iter().map(|&c| (c, 0)).collect();
            for r in &task.train {
                *counts.entry(r.label).or_default() += 1;
            }
            if let Some((&class, &found)) = counts.iter().find(|(_, &n)| n != expected) {
                return Err(ProtocolError::ShotCountMismatch {
                    task: pos,
                    class,
                    found,
                    expected,
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}
fn default_shots() -> usize {
    DEFAULT_SHOTS
}
fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}
fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub base_update_policy: BaseUpdatePolicy,
    /// Hidden widths of the relation scorer.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            capacity: DEFAULT_CAPACITY,
            shots: DEFAULT_SHOTS,
            base_update_policy: BaseUpdatePolicy::default(),
            hidden: default_hidden(),
            train: TrainConfig::default(),
            seed: 0,
            trials: default_trials(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidConfig(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite");
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad("beta must be a finite value >= 0");
        }
        if self.train.batch_size == 0 || self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return bad("train.batch_size and train.lr must be positive");
        }
        Ok(())
    }

    /// Seed of trial `i`.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, trial as u64)
    }
}

/// Class and task counts of the three cross-dataset setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ModelNetToScanObjectNN,
    ShapeNetToScanObjectNN,
    ShapeNetToCo3d,
}

impl Preset {
    pub const ALL: [Preset; 3] = [
        Preset::ModelNetToScanObjectNN,
        Preset::ShapeNetToScanObjectNN,
        Preset::ShapeNetToCo3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ModelNetToScanObjectNN => "modelnet40-scanobjectnn",
            Preset::ShapeNetToScanObjectNN => "shapenet-scanobjectnn",
            Preset::ShapeNetToCo3d => "shapenet-co3d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Classes introduced by each task, base first.
    pub fn classes_per_task(self) -> Vec<usize> {
        match self {
            Preset::ModelNetToScanObjectNN => vec![26, 4, 4, 3],
            Preset::ShapeNetToScanObjectNN => vec![44, 5, 5, 5],
            Preset::ShapeNetToCo3d => std::iter::once(39).chain(std::iter::repeat_n(5, 10)).collect(),
        }
    }

    /// Task skeletons with consecutive class ids and placeholder record
    /// indices: `base_train` and `test` records per class, `shots` per novel
    /// class.
    pub fn tasks(self, shots: usize, base_train: usize, test: usize) -> Vec<TaskSpec> {
        let mut next_class: ClassId = 0;
        let mut next_record = 0usize;
        let mut take = |label: ClassId, n: usize| -> Vec<SampleRef> {
            let refs = (0..n).map(|i| SampleRef { record: next_record + i, label }).collect();
            next_record += n;
            refs
        };
        self.classes_per_task()
            .into_iter()
            .enumerate()
            .map(|(index, n)| {
                let classes: Vec<ClassId> = (next_class..next_class + n as ClassId).collect();
                next_class += n as ClassId;
                let per_class = if index == 0 { base_train } else { shots };
                let train = classes.iter().flat_map(|&c| take(c, per_class)).collect();
                let test = classes.iter().flat_map(|&c| take(c, test)).collect();
                TaskSpec {
                    index,
                    classes,
                    train,
                    test,
                    shots: (index > 0).then_some(shots),
                }
            })
            .collect()
    }
}

/// The desk-scale calibration setup used by the end-to-end checks: 64-d
/// features, 20 base classes with 100 train / 20 test samples each, and three
/// novel tasks of 5 classes with 5 shots and 20 test samples each.
pub fn calibration_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        dim: 64,
        base_classes: 20,
        novel_tasks: 3,
        classes_per_novel_task: 5,
        train_per_base_class: 100,
        test_per_class: 20,
        shots: 5,
        intra_class_sigma: 0.05,
        modality_gap_sigma: CALIBRATION_MODALITY_GAP,
        seed,
    }
}

/// Prototype perturbation of the calibration setup.
pub const CALIBRATION_MODALITY_GAP: f64 = 0.2;

// ---------------------------------------------------------------------------
// Prepared experiment

/// Everything that is fixed across trials: data, task split, canonical class
/// order, the frozen scorer, and its logits for every test record.
#[derive(Debug)]
pub struct Prepared<'a> {
    pub set: &'a EmbeddingSet,
    pub tasks: Vec<TaskSpec>,
    /// All classes in reveal order: task 0's classes, then task 1's, and so on.
    pub class_order: Vec<ClassId>,
    pub params: Arc<RelationParams>,
    pub alignment: AlignmentSummary,
    logits: HashMap<usize, Vec<f64>>,
    class_index: HashMap<ClassId, usize>,
}

impl<'a> Prepared<'a> {
    /// Validates the tasks, trains the scorer on task 0 unless `params` is
    /// supplied, and scores every test record against every prototype.
    pub fn new(
        config: &ExperimentConfig,
        set: &'a EmbeddingSet,
        prototypes: &PrototypeSet,
        params: Option<RelationParams>,
    ) -> Result<Self, ProtocolError> {
        config.validate()?;
        let tasks = tasks_from_set(set, config.shots)?;
        validate_tasks(&tasks)?;

        let (params, alignment) = match params {
            Some(p) => {
                if p.dim() != set.dim() {
                    return Err(AlignmentError::DimMismatch {
                        expected: set.dim(),
                        got: p.dim(),
                    }
                    .into());
                }
                (p, AlignmentSummary { source: "checkpoint".into(), loss_history: vec![] })
            }
            None => {
                let init = init_relation_with(set.dim(), &config.hidden, derive_seed(config.seed, INIT_STREAM));
                let base_train = set.filter(|r| r.task == 0 && r.split == Split::Train);
                let mut train_cfg = config.train.clone();
                train_cfg.seed = config.seed;
                let trained = train_alignment(init, &base_train, prototypes, &train_cfg)?;
                let summary = AlignmentSummary {
                    source: "trained".into(),
                    loss_history: trained.loss_history,
                };
                (trained.params, summary)
            }
        };

        let class_order: Vec<ClassId> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        let proto_rows = class_order
            .iter()
            .map(|&c| {
                prototypes
                    .get(c)
                    .map(|p| p.vector.as_slice())
                    .ok_or(ProtocolError::MissingPrototype(c))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let test_records: Vec<usize> = tasks.iter().flat_map(|t| t.test.iter().map(|r| r.record)).collect();
        let features: Vec<&[f64]> = test_records.iter().map(|&i| set.records()[i].vector.as_slice()).collect();
        let matrix = logits_matrix(&params, &features, &proto_rows)?;
        let logits = test_records
            .iter()
            .zip(matrix.rows())
            .map(|(&i, row)| (i, row.to_vec()))
            .collect();
        let class_index = class_order.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        Ok(Self {
            set,
            tasks,
            class_order,
            params: Arc::new(params),
            alignment,
            logits,
            class_index,
        })
    }

    pub fn base_class_count(&self) -> usize {
        self.tasks[0].classes.len()
    }

    /// Scorer output for a test record over the first `classes` classes.
    pub fn similarity(&self, record: usize, classes: usize) -> SimilarityVector {
        SimilarityVector::from_logits(self.logits[&record][..classes].to_vec())
    }

    fn index_of(&self, class: ClassId) -> usize {
        self.class_index[&class]
    }
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Debug, Clone)]
pub struct SessionState {
    pub params: Arc<RelationParams>,
    pub cache: DualCache,
    /// Classes revealed so far, append-only.
    pub class_order: Vec<ClassId>,
    /// Last completed session.
    pub session: Option<usize>,
}

impl SessionState {
    pub fn new(params: Arc<RelationParams>, config: &ExperimentConfig) -> Self {
        Self {
            params,
            cache: DualCache::new(config.capacity, config.shots, config.base_update_policy),
            class_order: Vec::new(),
            session: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOutcome {
    pub record: usize,
    pub truth: ClassId,
    pub predicted: ClassId,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub report: SessionReport,
    pub samples: Vec<SampleOutcome>,
}

/// FNV-1a over a stream of words.
fn digest(words: impl Iterator<Item = u64>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Runs the session for `task_index`, mutating the cache in stream order.
pub fn run_session(
    state: &mut SessionState,
    prepared: &Prepared<'_>,
    config: &ExperimentConfig,
    task_index: usize,
    stream_seed: u64,
) -> Result<SessionOutcome, ProtocolError> {
    let expected = state.session.map_or(0, |s| s + 1);
    if task_index != expected || task_index >= prepared.tasks.len() {
        return Err(ProtocolError::OutOfOrderSession {
            after: state.session,
            got: task_index,
        });
    }
    let task = &prepared.tasks[task_index];
    state.class_order.extend(&task.classes);
    debug_assert_eq!(state.class_order[..], prepared.class_order[..state.class_order.len()]);
    let classes = state.class_order.len();

    if task_index > 0 {
        for r in &task.train {
            let key = &prepared.set.records()[r.record].vector;
            state.cache.insert_novel(key, prepared.index_of(r.label))?;
        }
    }

    let mut stream: Vec<SampleRef> = prepared.tasks[..=task_index]
        .iter()
        .flat_map(|t| t.test.iter().copied())
        .collect();
    SplitMix64::new(stream_seed).shuffle(&mut stream);

    let base_count = prepared.base_class_count();
    let inserting = match config.base_update_policy {
        BaseUpdatePolicy::Session0Only => task_index == 0,
        BaseUpdatePolicy::Always => true,
    };
    let mut samples = Vec::with_capacity(stream.len());
    for r in &stream {
        let v = &prepared.set.records()[r.record].vector;
        let sim = prepared.similarity(r.record, classes);
        let (label, entropy) = pseudo_label(&sim);
        let prediction = predict_with_scores(sim, &state.cache, v, config.alpha, config.beta)?;
        samples.push(SampleOutcome {
            record: r.record,
            truth: r.label,
            predicted: state.class_order[prediction.class],
        });
        if inserting && label < base_count {
            state.cache.insert_base_labelled(v, label, entropy);
        }
    }
    state.session = Some(task_index);

    let report = session_report(state, prepared, task_index, &samples)?;
    Ok(SessionOutcome { report, samples })
}

fn session_report(
    state: &SessionState,
    prepared: &Prepared<'_>,
    session: usize,
    samples: &[SampleOutcome],
) -> Result<SessionReport, ProtocolError> {
    let preds: Vec<ClassId> = samples.iter().map(|s| s.predicted).collect();
    let truths: Vec<ClassId> = samples.iter().map(|s| s.truth).collect();
    let base: BTreeSet<ClassId> = prepared.tasks[0].classes.iter().copied().collect();
    let joint = accuracy(&preds, &truths)?;
    let (base_acc, novel_acc) = split_accuracy(&preds, &truths, &base)?;
    let harmonic = match (base_acc, novel_acc) {
        (Some(b), Some(n)) => Some(harmonic(b, n).unwrap_or(0.0)),
        _ => None,
    };

    let mut tallies: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let t = tallies.entry(s.truth).or_default();
        t.0 += 1;
        t.1 += usize::from(s.truth == s.predicted);
    }
    let per_class = state
        .class_order
        .iter()
        .map(|&c| {
            let (n, correct) = tallies.get(&c).copied().unwrap_or_default();
            ClassTally { class_id: c, n, correct }
        })
        .collect();

    let stream_digest = digest(
        samples
            .iter()
            .flat_map(|s| [s.record as u64, s.predicted as u64]),
    );
    Ok(SessionReport {
        session,
        classes_seen: state.class_order.len(),
        n_test: samples.len(),
        accuracy: joint,
        base_accuracy: base_acc,
        novel_accuracy: novel_acc,
        harmonic,
        per_class,
        cache: state.cache.stats(),
        stream_digest,
    })
}

/// One trial: a fresh cache and every session in order.
pub fn run_trial(
    prepared: &Prepared<'_>,
    config: &ExperimentConfig,
    trial: usize,
) -> Result<(TrialReport, Vec<SessionOutcome>), ProtocolError> {
    let seed = config.trial_seed(trial);
    let mut state = SessionState::new(Arc::clone(&prepared.params), config);
    let mut outcomes = Vec::with_capacity(prepared.tasks.len());
    for t in 0..prepared.tasks.len() {
        outcomes.push(run_session(&mut state, prepared, config, t, derive_seed(seed, t as u64))?);
    }
    let report = TrialReport {
        trial,
        seed,
        sessions: outcomes.iter().map(|o| o.report.clone()).collect(),
    };
    Ok((report, outcomes))
}

/// Runs every trial against a prepared experiment. Only the adaptor settings
/// of `config` (alpha, beta, capacity, shots, policy, trials, seed) matter
/// here; the scorer is whatever `prepared` holds.
pub fn run_prepared(prepared: &Prepared<'_>, config: &ExperimentConfig) -> Result<ExperimentReport, ProtocolError> {
    config.validate()?;
    if prepared.tasks.iter().skip(1).any(|t| t.shots != Some(config.shots)) {
        // Shots were fixed when the tasks were validated.
        return Err(ProtocolError::InvalidConfig(format!(
            "shots={} differs from the prepared tasks",
            config.shots
        )));
    }
    let trials = (0..config.trials)
        .map(|i| run_trial(prepared, config, i).map(|(r, _)| r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentReport::assemble(config.clone(), prepared.alignment.clone(), trials))
}

pub fn run_experiment(
    config: &ExperimentConfig,
    set: &EmbeddingSet,
    prototypes: &PrototypeSet,
    params: Option<RelationParams>,
) -> Result<ExperimentReport, ProtocolError> {
    let prepared = Prepared::new(config, set, prototypes, params)?;
    run_prepared(&prepared, config)
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    CacheSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "cache-size" => Ok(Self::CacheSize),
            other => Err(format!("unknown sweep axis {other:?} (alpha, beta, cache-size)")),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::CacheSize => "cache-size",
        }
    }

    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, ProtocolError> {
        let mut c = config.clone();
        match self {
            SweepAxis::Alpha => c.alpha = value,
            SweepAxis::Beta => c.beta = value,
            SweepAxis::CacheSize => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(ProtocolError::InvalidConfig(format!(
                        "cache size must be a non-negative integer, got {value}"
                    )));
                }
                c.capacity = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    pub mean_harmonic: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: SweepAxis,
    pub points: Vec<AblationPoint>,
}

impl AblationReport {
    /// Markdown table with one column per swept value.
    pub fn to_markdown(&self) -> String {
        let fmt = |x: f64| {
            if x.fract() == 0.0 {
                format!("{x:.0}")
            } else {
                format!("{x}")
            }
        };
        let cell = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
        let values: Vec<String> = self.points.iter().map(|p| fmt(p.value)).collect();
        let hm: Vec<String> = self.points.iter().map(|p| cell(p.mean_harmonic)).collect();
        let acc: Vec<String> = self.points.iter().map(|p| cell(p.final_accuracy)).collect();
        let mut out = format!("| {} | {} |\n", self.axis.name(), values.join(" | "));
        out.push_str(&format!("|---|{}\n", "---|".repeat(values.len())));
        out.push_str(&format!("| Mean A_h | {} |\n", hm.join(" | ")));
        out.push_str(&format!("| Final acc | {} |\n", acc.join(" | ")));
        out
    }
}

/// One experiment per value, sharing the prepared scorer and trial seeds.
pub fn ablate(
    prepared: &Prepared<'_>,
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<AblationReport, ProtocolError> {
    if values.is_empty() {
        return Err(ProtocolError::InvalidConfig("empty sweep".into()));
    }
    let points = values
        .iter()
        .map(|&value| {
            let cfg = axis.apply(config, value)?;
            let report = run_prepared(prepared, &cfg)?;
            Ok(AblationPoint {
                value,
                mean_harmonic: report.mean_harmonic,
                final_accuracy: report.final_accuracy(),
                report,
            })
        })
        .collect::<Result<_, ProtocolError>>()?;
    Ok(AblationReport { axis, points })
}
