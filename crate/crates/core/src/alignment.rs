//! Vision–text relation scorer.
//!
//! A feed-forward net over the concatenation `v ⊕ e` of a sample feature and a
//! class prototype: `2m → 2048 → 1024 → 1` by default, LeakyReLU on hidden
//! layers and a sigmoid on the output. It is trained once on the base task
//! with one-vs-all binary cross-entropy and frozen afterwards; a frozen
//! parameter set refuses optimizer steps.
//!
//! The first layer is evaluated in split form, `W_v·v + W_e·e + b`, so a batch
//! of `B` samples against `C` classes costs `B + C` first-layer products
//! rather than `B·C`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{ClassId, EmbeddingSet, PrototypeSet, Split};
use crate::numerics::sigmoid;
use crate::rng::{derive_seed, SplitMix64};

pub const MAGIC: [u8; 4] = *b"ALN1";
pub const DEFAULT_HIDDEN: [usize; 2] = [2048, 1024];
pub const LEAKY_SLOPE: f64 = 0.01;

/// Rows of sample-class pairs evaluated per chunk when scoring many samples.
const SCORE_CHUNK_SAMPLES: usize = 32;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training set must hold only base-task train records ({0})")]
    NotBaseTrain(String),
    #[error("no prototype for class {0}")]
    MissingPrototype(ClassId),
    #[error("parameters are frozen")]
    Frozen,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// One fully connected layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weights: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams {
    dim: usize,
    slope: f64,
    layers: Vec<Dense>,
    frozen: bool,
}

impl RelationParams {
    /// Builds an unfrozen parameter set, checking that the layers chain from
    /// `2·dim` inputs down to a single output.
    pub fn from_layers(dim: usize, slope: f64, layers: Vec<Dense>) -> Result<Self, AlignmentError> {
        if dim == 0 || layers.is_empty() {
            return Err(AlignmentError::Shape("need dim >= 1 and at least one layer".into()));
        }
        let mut fan_in = 2 * dim;
        for (i, l) in layers.iter().enumerate() {
            if l.cols() != fan_in || l.bias.len() != l.rows() {
                return Err(AlignmentError::Shape(format!(
                    "layer {i} is {}x{} with {} biases, expected {fan_in} inputs",
                    l.rows(),
                    l.cols(),
                    l.bias.len()
                )));
            }
            fan_in = l.rows();
        }
        if fan_in != 1 {
            return Err(AlignmentError::Shape(format!("final layer has {fan_in} outputs")));
        }
        let finite = layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()));
        if !finite {
            return Err(AlignmentError::Shape("non-finite parameter".into()));
        }
        Ok(Self {
            dim,
            slope,
            layers,
            frozen: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Dense::rows).collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// Gradient of the mean loss, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn init_relation(dim: usize, seed: u64) -> RelationParams {
    init_relation_with(dim, &DEFAULT_HIDDEN, seed)
}

/// He-style uniform init: weights in `±sqrt(6 / fan_in)`, biases zero. Draws
/// are taken layer by layer in row-major order from one seeded stream.
pub fn init_relation_with(dim: usize, hidden: &[usize], seed: u64) -> RelationParams {
    assert!(dim >= 1, "dim must be at least 1");
    let mut rng = SplitMix64::new(seed);
    let mut fan_in = 2 * dim;
    let mut layers = Vec::new();
    for &out in hidden.iter().chain(std::iter::once(&1)) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out, fan_in), || rng.uniform(-bound, bound));
        layers.push(Dense {
            weights,
            bias: Array1::zeros(out),
        });
        fan_in = out;
    }
    RelationParams::from_layers(dim, LEAKY_SLOPE, layers).expect("valid by construction")
}

/// Per-class scores for one sample, in the order the prototypes were given.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl SimilarityVector {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let scores = logits.iter().map(|&z| sigmoid(z)).collect();
        Self { logits, scores }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Keeps the first `n` classes.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            logits: self.logits[..n].to_vec(),
            scores: self.scores[..n].to_vec(),
        }
    }
}

fn rows_matrix<R: AsRef<[f64]>>(rows: &[R], dim: usize) -> Result<Array2<f64>, AlignmentError> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(AlignmentError::DimMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        m.row_mut(i).assign(&ndarray::aview1(r));
    }
    Ok(m)
}

fn leaky_inplace(z: &mut Array2<f64>, slope: f64) {
    z.mapv_inplace(|x| if x > 0.0 { x } else { slope * x });
}

/// Activations cached by a batched forward pass. Pair `(s, c)` lives in row
/// `s * classes + c`.
struct Forward {
    /// Post-activation outputs of each hidden layer.
    hidden: Vec<Array2<f64>>,
    logits: Array1<f64>,
}

fn forward(params: &RelationParams, samples: ArrayView2<f64>, protos: ArrayView2<f64>) -> Forward {
    let m = params.dim;
    let (b, c) = (samples.nrows(), protos.nrows());
    let first = &params.layers[0];
    let w_v = first.weights.slice(s![.., ..m]);
    let w_e = first.weights.slice(s![.., m..]);
    let pv = samples.dot(&w_v.t());
    let pe = protos.dot(&w_e.t()) + &first.bias;

    let width = first.rows();
    let mut act = Array2::zeros((b * c, width));
    for si in 0..b {
        let mut block = act.slice_mut(s![si * c..(si + 1) * c, ..]);
        block.assign(&pe);
        block += &pv.row(si);
    }

    let last = params.layers.len() - 1;
    let mut hidden = Vec::with_capacity(last);
    if last == 0 {
        return Forward {
            logits: act.column(0).to_owned(),
            hidden,
        };
    }
    leaky_inplace(&mut act, params.slope);
    hidden.push(act);
    for layer in &params.layers[1..last] {
        let mut z = hidden.last().unwrap().dot(&layer.weights.t()) + &layer.bias;
        leaky_inplace(&mut z, params.slope);
        hidden.push(z);
    }
    let out = &params.layers[last];
    let logits = hidden.last().unwrap().dot(&out.weights.row(0)) + out.bias[0];
    Forward { hidden, logits }
}

/// Raw logits for every (sample, prototype) pair, `samples × prototypes`.
pub fn logits_matrix<R1: AsRef<[f64]>, R2: AsRef<[f64]>>(
    params: &RelationParams,
    samples: &[R1],
    prototypes: &[R2],
) -> Result<Array2<f64>, AlignmentError> {
    let e = rows_matrix(prototypes, params.dim)?;
    let c = prototypes.len();
    let mut out = Array2::zeros((samples.len(), c));
    for (chunk_idx, chunk) in samples.chunks(SCORE_CHUNK_SAMPLES).enumerate() {
        let v = rows_matrix(chunk, params.dim)?;
        let fw = forward(params, v.view(), e.view());
        let start = chunk_idx * SCORE_CHUNK_SAMPLES;
        for (si, row) in fw.logits.exact_chunks(c.max(1)).into_iter().enumerate() {
            out.row_mut(start + si).assign(&row);
        }
    }
    Ok(out)
}

/// Score of a single `(v, e)` pair: `(sigmoid(logit), logit)`.
pub fn score_pair(params: &RelationParams, v: &[f64], e: &[f64]) -> Result<(f64, f64), AlignmentError> {
    let z = logits_matrix(params, &[v], &[e])?[[0, 0]];
    Ok((sigmoid(z), z))
}

pub fn score_all<R: AsRef<[f64]>>(
    params: &RelationParams,
    v: &[f64],
    prototypes: &[R],
) -> Result<SimilarityVector, AlignmentError> {
    let logits = logits_matrix(params, &[v], prototypes)?;
    Ok(SimilarityVector::from_logits(logits.row(0).to_vec()))
}

/// `max(z,0) - z·t + ln(1 + e^{-|z|})`, the logit form of binary cross-entropy.
fn bce_from_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Mean one-vs-all binary cross-entropy over all classes.
pub fn bce_loss(sim: &SimilarityVector, target: usize) -> f64 {
    assert!(target < sim.len(), "target class out of range");
    let total: f64 = sim
        .logits
        .iter()
        .enumerate()
        .map(|(k, &z)| bce_from_logit(z, if k == target { 1.0 } else { 0.0 }))
        .sum();
    total / sim.len() as f64
}

/// One training example: a sample feature and the index of its class among
/// the prototypes passed alongside.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub feature: &'a [f64],
    pub target: usize,
}

/// Mean loss over the batch and all classes, and its exact gradient.
pub fn grad<R: AsRef<[f64]>>(
    params: &RelationParams,
    prototypes: &[R],
    batch: &[Example<'_>],
) -> Result<(f64, Gradients), AlignmentError> {
    if batch.is_empty() {
        return Err(AlignmentError::EmptyTrainSet);
    }
    let m = params.dim;
    let c = prototypes.len();
    if let Some(ex) = batch.iter().find(|ex| ex.target >= c) {
        return Err(AlignmentError::Shape(format!(
            "target {} out of range for {c} classes",
            ex.target
        )));
    }
    let e = rows_matrix(prototypes, m)?;
    let features: Vec<&[f64]> = batch.iter().map(|ex| ex.feature).collect();
    let v = rows_matrix(&features, m)?;
    let fw = forward(params, v.view(), e.view());

    let n = (batch.len() * c) as f64;
    let mut loss = 0.0;
    let mut dz = Array1::zeros(fw.logits.len());
    for (si, ex) in batch.iter().enumerate() {
        for k in 0..c {
            let row = si * c + k;
            let z = fw.logits[row];
            let t = if k == ex.target { 1.0 } else { 0.0 };
            loss += bce_from_logit(z, t);
            dz[row] = (sigmoid(z) - t) / n;
        }
    }
    loss /= n;

    let last = params.layers.len() - 1;
    let mut grads: Vec<Dense> = params.layers.iter().map(|l| Dense::zeros(l.rows(), l.cols())).collect();

    // Gradient w.r.t. the pre-activation of the current layer, rows = pairs.
    let mut delta: Array2<f64> = dz.insert_axis(Axis(1));
    for l in (1..=last).rev() {
        let input = &fw.hidden[l - 1];
        grads[l].weights = delta.t().dot(input);
        grads[l].bias = delta.sum_axis(Axis(0));
        let mut upstream = delta.dot(&params.layers[l].weights);
        let slope = params.slope;
        Zip::from(&mut upstream).and(input).for_each(|d, &a| {
            if a <= 0.0 {
                *d *= slope;
            }
        });
        delta = upstream;
    }

    // First layer: split the pair rows back into sample and prototype sums.
    let width = params.layers[0].rows();
    let b = batch.len();
    let mut by_sample = Array2::zeros((b, width));
    let mut by_class = Array2::zeros((c, width));
    for si in 0..b {
        let block = delta.slice(s![si * c..(si + 1) * c, ..]);
        by_sample.row_mut(si).assign(&block.sum_axis(Axis(0)));
        by_class += &block;
    }
    let mut w0 = Array2::zeros((width, 2 * m));
    w0.slice_mut(s![.., ..m]).assign(&by_sample.t().dot(&v));
    w0.slice_mut(s![.., m..]).assign(&by_class.t().dot(&e));
    grads[0].weights = w0;
    grads[0].bias = by_class.sum_axis(Axis(0));

    Ok((loss, Gradients { layers: grads }))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl AdamState {
    pub fn new(params: &RelationParams, config: AdamConfig) -> Self {
        let zeros: Vec<Dense> = params.layers.iter().map(|l| Dense::zeros(l.rows(), l.cols())).collect();
        Self {
            step: 0,
            config,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Bias-corrected Adam update. Refuses to touch frozen parameters.
pub fn adam_step(
    params: &mut RelationParams,
    state: &mut AdamState,
    grads: &Gradients,
) -> Result<(), AlignmentError> {
    if params.frozen {
        return Err(AlignmentError::Frozen);
    }
    let shapes_match = grads.layers.len() == params.layers.len()
        && grads.layers.iter().zip(&params.layers).all(|(g, p)| {
            g.weights.dim() == p.weights.dim() && g.bias.len() == p.bias.len()
        });
    if !shapes_match {
        return Err(AlignmentError::Shape("gradient does not match parameters".into()));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        Zip::from(&mut p.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut p.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    25
}
fn default_lr() -> f64 {
    AdamConfig::default().lr
}
fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_epsilon() -> f64 {
    AdamConfig::default().epsilon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAlignment {
    pub params: RelationParams,
    /// Mean per-pair loss of each epoch.
    pub loss_history: Vec<f64>,
    pub config: TrainConfig,
}

impl TrainedAlignment {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// Sorted class ids of a base train set and the matching prototype rows.
pub fn base_classes(
    train: &EmbeddingSet,
    prototypes: &PrototypeSet,
) -> Result<(Vec<ClassId>, Vec<Vec<f64>>), AlignmentError> {
    let mut classes: Vec<ClassId> = train.records().iter().map(|r| r.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let rows = classes
        .iter()
        .map(|&c| {
            prototypes
                .get(c)
                .map(|p| p.vector.clone())
                .ok_or(AlignmentError::MissingPrototype(c))
        })
        .collect::<Result<_, _>>()?;
    Ok((classes, rows))
}

/// Trains on base-task train records with seeded per-epoch shuffles and
/// returns frozen parameters. The last partial batch is kept.
pub fn train_alignment(
    mut params: RelationParams,
    train: &EmbeddingSet,
    prototypes: &PrototypeSet,
    config: &TrainConfig,
) -> Result<TrainedAlignment, AlignmentError> {
    if train.is_empty() {
        return Err(AlignmentError::EmptyTrainSet);
    }
    if params.frozen {
        return Err(AlignmentError::Frozen);
    }
    if train.dim() != params.dim {
        return Err(AlignmentError::DimMismatch {
            expected: params.dim,
            got: train.dim(),
        });
    }
    let first_task = train.records()[0].task;
    if let Some(r) = train
        .records()
        .iter()
        .find(|r| r.task != first_task || r.split != Split::Train)
    {
        return Err(AlignmentError::NotBaseTrain(format!(
            "found task {} / {:?} alongside task {first_task}",
            r.task, r.split
        )));
    }
    if config.batch_size == 0 {
        return Err(AlignmentError::Shape("batch_size must be at least 1".into()));
    }

    let (classes, proto_rows) = base_classes(train, prototypes)?;
    let targets: Vec<usize> = train
        .records()
        .iter()
        .map(|r| classes.binary_search(&r.label).expect("label collected above"))
        .collect();

    let mut rng = SplitMix64::new(derive_seed(config.seed, 0x5348_5546));
    let mut adam = AdamState::new(&params, config.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| Example {
                    feature: &train.records()[i].vector,
                    target: targets[i],
                })
                .collect();
            let (loss, g) = grad(&params, &proto_rows, &batch)?;
            weighted += loss * chunk.len() as f64;
            adam_step(&mut params, &mut adam, &g)?;
        }
        loss_history.push(weighted / train.len() as f64);
    }
    params.frozen = true;
    Ok(TrainedAlignment {
        params,
        loss_history,
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// ALN1 checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub m: usize,
    pub slope: f64,
    pub hidden: Vec<usize>,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

pub fn checkpoint_sidecar(path: &Path) -> PathBuf {
    crate::embedding::sidecar_path(path)
}

pub fn encode_checkpoint(params: &RelationParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + params.num_params() * 4 + params.layers.len() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.cols() as u32).to_le_bytes());
        for &w in l.weights.iter() {
            buf.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &b in l.bias.iter() {
            buf.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], slope: f64) -> Result<RelationParams, AlignmentError> {
    let bad = |msg: &str| AlignmentError::BadCheckpoint(msg.to_string());
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], AlignmentError> {
        let chunk = bytes.get(at..at + n).ok_or_else(|| bad("truncated"))?;
        at += n;
        Ok(chunk)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = read_u32(take(4)?);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(take(4)?);
        let cols = read_u32(take(4)?);
        let floats = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let w = floats(take(rows * cols * 4)?);
        let bias = floats(take(rows * 4)?);
        layers.push(Dense {
            weights: Array2::from_shape_vec((rows, cols), w).map_err(|e| bad(&e.to_string()))?,
            bias: Array1::from(bias),
        });
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let cols = layers.first().map(Dense::cols).ok_or_else(|| bad("no layers"))?;
    if cols % 2 != 0 {
        return Err(bad("first layer input width is odd"));
    }
    let mut params = RelationParams::from_layers(cols / 2, slope, layers)?;
    params.frozen = true;
    Ok(params)
}

pub fn save_checkpoint(
    params: &RelationParams,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), AlignmentError> {
    let io_err = |p: &Path, source| AlignmentError::Io {
        path: p.to_path_buf(),
        source,
    };
    fs::write(path, encode_checkpoint(params)).map_err(|e| io_err(path, e))?;
    let side = checkpoint_sidecar(path);
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    fs::write(&side, text).map_err(|e| io_err(&side, e))
}

/// Loads a checkpoint; the result is frozen.
pub fn load_checkpoint(path: &Path) -> Result<(RelationParams, CheckpointMeta), AlignmentError> {
    let io_err = |p: &Path, source| AlignmentError::Io {
        path: p.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let side = checkpoint_sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| AlignmentError::BadCheckpoint(e.to_string()))?;
    let params = decode_checkpoint(&bytes, meta.slope)?;
    if params.dim != meta.m || params.hidden() != meta.hidden {
        return Err(AlignmentError::BadCheckpoint(format!(
            "sidecar declares m={} hidden={:?}, binary holds m={} hidden={:?}",
            meta.m,
            meta.hidden,
            params.dim,
            params.hidden()
        )));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{generate_synthetic, SampleRecord, SynthConfig};
    use proptest::prelude::*;

    /// Plain-loop forward pass on the concatenated input.
    fn naive_logit(p: &RelationParams, v: &[f64], e: &[f64]) -> f64 {
        let mut x: Vec<f64> = v.iter().chain(e).copied().collect();
        let last = p.layers().len() - 1;
        for (i, l) in p.layers().iter().enumerate() {
            let mut y = vec![0.0; l.rows()];
            for (r, out) in y.iter_mut().enumerate() {
                *out = l.bias[r] + (0..l.cols()).map(|c| l.weights[[r, c]] * x[c]).sum::<f64>();
                if i < last && *out < 0.0 {
                    *out *= p.slope();
                }
            }
            x = y;
        }
        x[0]
    }

    fn naive_loss(p: &RelationParams, protos: &[Vec<f64>], batch: &[(Vec<f64>, usize)]) -> f64 {
        let mut total = 0.0;
        for (v, t) in batch {
            for (k, e) in protos.iter().enumerate() {
                let a = 1.0 / (1.0 + (-naive_logit(p, v, e)).exp());
                total -= if k == *t { a.ln() } else { (1.0 - a).ln() };
            }
        }
        total / (batch.len() * protos.len()) as f64
    }

    fn unit(rng: &mut SplitMix64, m: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        crate::numerics::l2_normalize(&v).unwrap()
    }

    fn zero_params(m: usize) -> RelationParams {
        let layers = [(4, 2 * m), (3, 4), (1, 3)]
            .iter()
            .map(|&(r, c)| Dense::zeros(r, c))
            .collect();
        RelationParams::from_layers(m, LEAKY_SLOPE, layers).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_relation_with(6, &[10, 4], 3);
        assert_eq!(a, init_relation_with(6, &[10, 4], 3));
        assert_ne!(a, init_relation_with(6, &[10, 4], 4));
        for l in a.layers() {
            let bound = (6.0 / l.cols() as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(init_relation(4, 0).hidden(), vec![2048, 1024]);
    }

    #[test]
    fn zero_weights_score_one_half() {
        let p = zero_params(3);
        let (s, z) = score_pair(&p, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!((s, z), (0.5, 0.0));
        let sim = score_all(&p, &[1.0, 0.0, 0.0], &[vec![0.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(sim.scores, vec![0.5, 0.5]);
        assert!(matches!(
            score_pair(&p, &[1.0, 0.0], &[0.0, 1.0, 0.0]),
            Err(AlignmentError::DimMismatch { .. })
        ));
    }

    #[test]
    fn forward_matches_naive_loops_and_order_contract() {
        let mut rng = SplitMix64::new(11);
        let p = init_relation_with(8, &[16, 8], 2);
        let v = unit(&mut rng, 8);
        let protos: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let sim = score_all(&p, &v, &protos).unwrap();
        for (k, e) in protos.iter().enumerate() {
            assert!((sim.logits[k] - naive_logit(&p, &v, e)).abs() <= 1e-12);
            assert!((sim.scores[k] - sigmoid(sim.logits[k])).abs() <= 1e-12);
            assert!(sim.scores[k] > 0.0 && sim.scores[k] < 1.0);
        }
        let reversed: Vec<Vec<f64>> = protos.iter().rev().cloned().collect();
        let mut back = score_all(&p, &v, &reversed).unwrap().logits;
        back.reverse();
        assert_eq!(back, sim.logits);
    }

    #[test]
    fn bce_examples() {
        let uniform = SimilarityVector::from_logits(vec![0.0; 7]);
        assert!((bce_loss(&uniform, 3) - 2f64.ln()).abs() <= 1e-12);
        let logit = |a: f64| (a / (1.0 - a)).ln();
        let sim = SimilarityVector::from_logits(vec![logit(0.8), logit(0.3)]);
        let oracle = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((bce_loss(&sim, 0) - oracle).abs() <= 1e-12);
        assert!((bce_loss(&sim, 0) - 0.28990).abs() <= 1e-5);
        let sharp = SimilarityVector::from_logits(vec![40.0, -40.0, -40.0]);
        assert!(bce_loss(&sharp, 0) < 1e-15);
        assert!(bce_loss(&SimilarityVector::from_logits(vec![-800.0, 800.0]), 0).is_finite());
    }

    fn grad_check(m: usize, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let mut p = init_relation_with(m, &[6, 5], seed);
        for l in p.layers.iter_mut() {
            l.bias.mapv_inplace(|_| rng.uniform(-0.3, 0.3));
        }
        let protos: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, m)).collect();
        let batch: Vec<(Vec<f64>, usize)> = (0..4).map(|i| (unit(&mut rng, m), i % 3)).collect();
        let examples: Vec<Example> = batch.iter().map(|(v, t)| Example { feature: v, target: *t }).collect();
        let (loss, g) = grad(&p, &protos, &examples).unwrap();
        assert!((loss - naive_loss(&p, &protos, &batch)).abs() <= 1e-12);

        let h = 1e-5;
        for (li, gl) in g.layers.iter().enumerate() {
            for ((r, c), &analytic) in gl.weights.indexed_iter() {
                let at = |d: f64| {
                    let mut q = p.clone();
                    q.layers[li].weights[[r, c]] += d;
                    naive_loss(&q, &protos, &batch)
                };
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "layer {li} w[{r},{c}]: {analytic} vs {numeric}");
            }
            for (r, &analytic) in gl.bias.iter().enumerate() {
                let at = |d: f64| {
                    let mut q = p.clone();
                    q.layers[li].bias[r] += d;
                    naive_loss(&q, &protos, &batch)
                };
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "layer {li} b[{r}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            grad_check(5, seed);
        }
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let mut rng = SplitMix64::new(1);
        let p = init_relation_with(4, &[8, 4], 1);
        let protos: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
        let v = unit(&mut rng, 4);
        let one = [Example { feature: &v, target: 1 }];
        let two = [one[0], one[0]];
        let (l1, g1) = grad(&p, &protos, &one).unwrap();
        let (l2, g2) = grad(&p, &protos, &two).unwrap();
        assert!((l1 - l2).abs() <= 1e-12);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        // Output bias alone drives every logit: +50 for the single class.
        let mut p = zero_params(2);
        p.layers[2].bias[0] = 50.0;
        let v = [1.0, 0.0];
        let (loss, g) = grad(&p, &[vec![0.0, 1.0]], &[Example { feature: &v, target: 0 }]).unwrap();
        assert!(loss < 1e-20);
        assert!(g.norm() <= 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = init_relation_with(3, &[4], 0);
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        let zero = Gradients {
            layers: p.layers().iter().map(|l| Dense::zeros(l.rows(), l.cols())).collect(),
        };
        adam_step(&mut p, &mut s, &zero).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = zero_params(1);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients {
            layers: p.layers().iter().map(|l| Dense::zeros(l.rows(), l.cols())).collect(),
        };
        g.layers[0].weights[[0, 0]] = 3.7;
        g.layers[1].bias[2] = -0.02;
        adam_step(&mut p, &mut s, &g).unwrap();
        assert!((p.layers[0].weights[[0, 0]] + 1e-3).abs() <= 1e-9);
        assert!((p.layers[1].bias[2] - 1e-3).abs() <= 1e-6);
        assert_eq!(p.layers[2].bias[0], 0.0);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        // f(x) = (x - 3)^2 / 2 on the output bias; gradient x - 3.
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = zero_params(1);
        p.layers[2].bias[0] = 0.5;
        let mut s = AdamState::new(&p, cfg);

        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = x - 3.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let mut grads = Gradients {
                layers: p.layers().iter().map(|l| Dense::zeros(l.rows(), l.cols())).collect(),
            };
            grads.layers[2].bias[0] = p.layers[2].bias[0] - 3.0;
            adam_step(&mut p, &mut s, &grads).unwrap();
            assert!((p.layers[2].bias[0] - x).abs() <= 1e-12);
        }
        assert_eq!(s.step, 2);
    }

    fn separable(m: usize, classes: usize, seed: u64) -> (EmbeddingSet, PrototypeSet) {
        let cfg = SynthConfig {
            dim: m,
            base_classes: classes,
            novel_tasks: 1,
            classes_per_novel_task: 1,
            train_per_base_class: 20,
            test_per_class: 10,
            shots: 1,
            intra_class_sigma: 0.0,
            modality_gap_sigma: 0.0,
            seed,
        };
        let (set, protos) = generate_synthetic(&cfg).unwrap();
        (set.filter(|r| r.task == 0), protos)
    }

    fn train_split(set: &EmbeddingSet) -> EmbeddingSet {
        set.filter(|r| r.split == Split::Train)
    }

    #[test]
    fn training_is_deterministic_and_frozen() {
        let (set, protos) = separable(8, 4, 2);
        let train = train_split(&set);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let init = init_relation_with(8, &[16, 8], 5);
        let a = train_alignment(init.clone(), &train, &protos, &cfg).unwrap();
        let b = train_alignment(init, &train, &protos, &cfg).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.loss_history, b.loss_history);
        assert!(a.params.is_frozen());

        let mut frozen = a.params.clone();
        let mut state = AdamState::new(&frozen, AdamConfig::default());
        let g = Gradients {
            layers: frozen.layers().iter().map(|l| Dense::zeros(l.rows(), l.cols())).collect(),
        };
        assert!(matches!(adam_step(&mut frozen, &mut state, &g), Err(AlignmentError::Frozen)));
        assert!(matches!(
            train_alignment(a.params, &train, &protos, &cfg),
            Err(AlignmentError::Frozen)
        ));
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let (set, protos) = separable(8, 3, 0);
        let init = init_relation_with(8, &[4], 0);
        let cfg = TrainConfig::default();
        let empty = set.filter(|_| false);
        assert!(matches!(
            train_alignment(init.clone(), &empty, &protos, &cfg),
            Err(AlignmentError::EmptyTrainSet)
        ));
        assert!(matches!(
            train_alignment(init.clone(), &set, &protos, &cfg),
            Err(AlignmentError::NotBaseTrain(_))
        ));
        assert!(matches!(
            train_alignment(init_relation_with(4, &[4], 0), &train_split(&set), &protos, &cfg),
            Err(AlignmentError::DimMismatch { .. })
        ));
    }

    #[test]
    fn zero_noise_base_task_is_learned() {
        let (set, protos) = separable(64, 10, 7);
        let train = train_split(&set);
        let init = init_relation_with(64, &[128, 64], 3);
        let trained = train_alignment(init, &train, &protos, &TrainConfig::default()).unwrap();
        let h = &trained.loss_history;
        assert_eq!(h.len(), 10);
        assert!(h[9] < h[0]);

        let (classes, rows) = base_classes(&train, &protos).unwrap();
        let tests: Vec<&SampleRecord> = set.records().iter().filter(|r| r.split == Split::Test).collect();
        let features: Vec<&[f64]> = tests.iter().map(|r| r.vector.as_slice()).collect();
        let logits = logits_matrix(&trained.params, &features, &rows).unwrap();
        let correct = tests
            .iter()
            .zip(logits.rows())
            .filter(|(r, row)| classes[crate::numerics::argmax(&row.to_vec())] == r.label)
            .count();
        assert!(correct as f64 / tests.len() as f64 >= 0.99, "{correct}/{}", tests.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.aln");
        let p = init_relation_with(4, &[6, 3], 9);
        let meta = CheckpointMeta {
            m: 4,
            slope: LEAKY_SLOPE,
            hidden: vec![6, 3],
            train_config: Some(TrainConfig::default()),
            final_loss: Some(0.25),
            loss_history: vec![0.5, 0.25],
        };
        save_checkpoint(&p, &meta, &path).unwrap();
        let (q, back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, meta);
        assert!(q.is_frozen());
        for (a, b) in p.to_flat().iter().zip(q.to_flat()) {
            assert_eq!(*a as f32, b as f32);
        }
        assert_eq!(encode_checkpoint(&q), fs::read(&path).unwrap());

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes, 0.01), Err(AlignmentError::BadCheckpoint(_))));
        bytes.truncate(10);
        assert!(decode_checkpoint(&bytes, 0.01).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn argmax_of_scores_equals_argmax_of_logits(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let p = init_relation_with(6, &[8], seed);
            let protos: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 6)).collect();
            let sim = score_all(&p, &unit(&mut rng, 6), &protos).unwrap();
            prop_assert_eq!(crate::numerics::argmax(&sim.scores), crate::numerics::argmax(&sim.logits));
        }

        #[test]
        fn loss_is_invariant_under_class_relabeling(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let p = init_relation_with(4, &[6], seed);
            let protos: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 4)).collect();
            let v = unit(&mut rng, 4);
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| protos[i].clone()).collect();
            let target = 3;
            let new_target = perm.iter().position(|&i| i == target).unwrap();
            let (a, _) = grad(&p, &protos, &[Example { feature: &v, target }]).unwrap();
            let (b, _) = grad(&p, &permuted, &[Example { feature: &v, target: new_target }]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
