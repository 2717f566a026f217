//! Embedding sets, class prototypes, and their on-disk form.
//!
//! Binary layout (`EMB1`), all integers and floats little-endian:
//!
//! ```text
//! magic  "EMB1"          4 bytes
//! dim    u32
//! count  u32
//! flags  u32             bit 0: rows were stored normalized
//! data   count*dim f32   row-major
//! ```
//!
//! Per-row metadata lives in a JSON sidecar at `<file>.meta.json`, listed in
//! the same order as the binary rows. Sample files carry
//! `{label, task, split, class_name?}` per row; prototype files carry
//! `{class_id, prompt_text?}`.
//!
//! Vectors are held in memory as `f64` and are re-normalized on load unless
//! they are already unit up to 32-bit rounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{l2_normalize, norm};
use crate::rng::SplitMix64;

pub const MAGIC: [u8; 4] = *b"EMB1";
const HEADER_LEN: usize = 16;
const FLAG_NORMALIZED: u32 = 1;

pub type ClassId = u32;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("bad magic {found:?}, expected \"EMB1\"")]
    BadMagic { found: [u8; 4] },
    #[error("dimension/count mismatch: {0}")]
    DimMismatch(String),
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("class {class} appears in the training label space of tasks {first} and {second}")]
    DisjointnessViolation {
        class: ClassId,
        first: u32,
        second: u32,
    },
    #[error("duplicate class id {0}")]
    DuplicateClassId(ClassId),
    #[error("invalid synthetic config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl EmbeddingError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub vector: Vec<f64>,
    pub label: ClassId,
    pub task: u32,
    pub split: Split,
    pub class_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    File { path: PathBuf },
    Synthetic { seed: u64, config: SynthConfig },
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<SampleRecord>,
    pub provenance: Provenance,
}

impl EmbeddingSet {
    /// Normalizes every vector and checks the set invariants.
    pub fn new(
        dim: usize,
        mut records: Vec<SampleRecord>,
        provenance: Provenance,
    ) -> Result<Self, EmbeddingError> {
        for (index, r) in records.iter_mut().enumerate() {
            r.vector = checked_unit(index, dim, &r.vector)?;
        }
        let set = Self {
            dim,
            records,
            provenance,
        };
        set.check_disjoint()?;
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted, de-duplicated task indices present in the set.
    pub fn tasks(&self) -> Vec<u32> {
        let tasks: BTreeSet<u32> = self.records.iter().map(|r| r.task).collect();
        tasks.into_iter().collect()
    }

    /// Indices of records belonging to `(task, split)`, in file order.
    pub fn partition(&self, task: u32, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.task == task && r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Keeps only records matching `keep`; provenance is carried over.
    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Self {
        Self {
            dim: self.dim,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates sets of equal dimension and re-checks disjointness.
    pub fn concat(sets: Vec<EmbeddingSet>) -> Result<Self, EmbeddingError> {
        let dim = sets.first().map(|s| s.dim).unwrap_or(0);
        let mut records = Vec::new();
        for s in sets {
            if s.dim != dim {
                return Err(EmbeddingError::DimMismatch(format!(
                    "cannot concatenate dim {} with dim {}",
                    dim, s.dim
                )));
            }
            records.extend(s.records);
        }
        let set = Self {
            dim,
            records,
            provenance: Provenance::Memory,
        };
        set.check_disjoint()?;
        Ok(set)
    }

    fn check_disjoint(&self) -> Result<(), EmbeddingError> {
        let mut owner: BTreeMap<ClassId, u32> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            match owner.get(&r.label) {
                Some(&t) if t != r.task => {
                    return Err(EmbeddingError::DisjointnessViolation {
                        class: r.label,
                        first: t.min(r.task),
                        second: t.max(r.task),
                    })
                }
                Some(_) => {}
                None => {
                    owner.insert(r.label, r.task);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: ClassId,
    pub vector: Vec<f64>,
    pub prompt_text: Option<String>,
}

/// Prototypes with unique class ids, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    prototypes: Vec<ClassPrototype>,
}

impl PrototypeSet {
    pub fn new(dim: usize, mut prototypes: Vec<ClassPrototype>) -> Result<Self, EmbeddingError> {
        let mut seen = BTreeSet::new();
        for (index, p) in prototypes.iter_mut().enumerate() {
            if !seen.insert(p.class_id) {
                return Err(EmbeddingError::DuplicateClassId(p.class_id));
            }
            p.vector = checked_unit(index, dim, &p.vector)?;
        }
        Ok(Self { dim, prototypes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[ClassPrototype] {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, class_id: ClassId) -> Option<&ClassPrototype> {
        self.prototypes.iter().find(|p| p.class_id == class_id)
    }
}

fn checked_unit(index: usize, dim: usize, v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if v.len() != dim {
        return Err(EmbeddingError::DimMismatch(format!(
            "record {index} has length {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::CorruptRecord {
            index,
            reason: "non-finite value".into(),
        });
    }
    // Rows already unit up to storage rounding are kept as stored, so a
    // save/load cycle does not drift by an ulp each time.
    if (norm(v) - 1.0).abs() <= UNIT_TOLERANCE {
        return Ok(v.to_vec());
    }
    l2_normalize(v).map_err(|_| EmbeddingError::CorruptRecord {
        index,
        reason: "zero vector".into(),
    })
}

/// Largest norm deviation treated as already unit.
pub const UNIT_TOLERANCE: f64 = 1e-5;

// ---------------------------------------------------------------------------
// EMB1 files

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    label: ClassId,
    task: u32,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrototypeMeta {
    class_id: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar<T> {
    format: String,
    dim: usize,
    count: usize,
    rows: Vec<T>,
}

/// Path of the JSON sidecar for an `EMB1` file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn encode_rows<'a>(dim: usize, rows: impl ExactSizeIterator<Item = &'a [f64]>) -> Vec<u8> {
    let count = rows.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + count * dim * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&FLAG_NORMALIZED.to_le_bytes());
    for row in rows {
        for &x in row {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf
}

/// Decoded binary payload: `(dim, rows)` with rows widened to `f64`.
fn decode_rows(bytes: &[u8]) -> Result<(usize, Vec<Vec<f64>>), EmbeddingError> {
    if bytes.len() < HEADER_LEN {
        return Err(EmbeddingError::DimMismatch(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(EmbeddingError::BadMagic { found: magic });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (dim, count) = (word(4), word(8));
    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| EmbeddingError::DimMismatch("header overflows".into()))?;
    if payload.len() != expected {
        return Err(EmbeddingError::DimMismatch(format!(
            "header declares {count} x {dim} floats but payload holds {} bytes",
            payload.len()
        )));
    }
    let rows = payload
        .chunks_exact(4 * dim.max(1))
        .take(count)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        })
        .collect();
    Ok((dim, rows))
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(
    path: &Path,
    dim: usize,
    count: usize,
) -> Result<Vec<T>, EmbeddingError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| EmbeddingError::io(&side, e))?;
    let meta: Sidecar<T> = serde_json::from_str(&text).map_err(|source| EmbeddingError::Sidecar {
        path: side.clone(),
        source,
    })?;
    if meta.format != "EMB1" {
        return Err(EmbeddingError::DimMismatch(format!(
            "sidecar format {:?}, expected \"EMB1\"",
            meta.format
        )));
    }
    if meta.dim != dim || meta.count != count || meta.rows.len() != count {
        return Err(EmbeddingError::DimMismatch(format!(
            "sidecar declares {} rows (listing {}) of dim {}, binary holds {count} of dim {dim}",
            meta.count,
            meta.rows.len(),
            meta.dim
        )));
    }
    Ok(meta.rows)
}

fn write_pair<T: Serialize>(
    path: &Path,
    binary: Vec<u8>,
    dim: usize,
    rows: Vec<T>,
) -> Result<(), EmbeddingError> {
    fs::write(path, binary).map_err(|e| EmbeddingError::io(path, e))?;
    let side = sidecar_path(path);
    let meta = Sidecar {
        format: "EMB1".to_string(),
        dim,
        count: rows.len(),
        rows,
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    text.push('\n');
    fs::write(&side, text).map_err(|e| EmbeddingError::io(&side, e))
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), EmbeddingError> {
    let binary = encode_rows(set.dim, set.records.iter().map(|r| r.vector.as_slice()));
    let rows = set
        .records
        .iter()
        .map(|r| SampleMeta {
            label: r.label,
            task: r.task,
            split: r.split,
            class_name: r.class_name.clone(),
        })
        .collect();
    write_pair(path, binary, set.dim, rows)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, EmbeddingError> {
    let bytes = fs::read(path).map_err(|e| EmbeddingError::io(path, e))?;
    let (dim, vectors) = decode_rows(&bytes)?;
    let meta: Vec<SampleMeta> = read_sidecar(path, dim, vectors.len())?;
    let records = vectors
        .into_iter()
        .zip(meta)
        .map(|(vector, m)| SampleRecord {
            vector,
            label: m.label,
            task: m.task,
            split: m.split,
            class_name: m.class_name,
        })
        .collect();
    EmbeddingSet::new(
        dim,
        records,
        Provenance::File {
            path: path.to_path_buf(),
        },
    )
}

pub fn save_prototypes(set: &PrototypeSet, path: &Path) -> Result<(), EmbeddingError> {
    let binary = encode_rows(set.dim, set.prototypes.iter().map(|p| p.vector.as_slice()));
    let rows = set
        .prototypes
        .iter()
        .map(|p| PrototypeMeta {
            class_id: p.class_id,
            prompt_text: p.prompt_text.clone(),
        })
        .collect();
    write_pair(path, binary, set.dim, rows)
}

pub fn load_prototypes(path: &Path) -> Result<PrototypeSet, EmbeddingError> {
    let bytes = fs::read(path).map_err(|e| EmbeddingError::io(path, e))?;
    let (dim, vectors) = decode_rows(&bytes)?;
    let meta: Vec<PrototypeMeta> = read_sidecar(path, dim, vectors.len())?;
    let prototypes = vectors
        .into_iter()
        .zip(meta)
        .map(|(vector, m)| ClassPrototype {
            class_id: m.class_id,
            vector,
            prompt_text: m.prompt_text,
        })
        .collect();
    PrototypeSet::new(dim, prototypes)
}

// ---------------------------------------------------------------------------
// Synthetic task streams

fn default_dim() -> usize {
    1024
}

/// Desk-scale stand-in for the frozen encoders.
///
/// Class ids are assigned consecutively: `0..base_classes` for task 0, then
/// `classes_per_novel_task` fresh ids per novel task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub base_classes: usize,
    pub novel_tasks: usize,
    pub classes_per_novel_task: usize,
    pub train_per_base_class: usize,
    pub test_per_class: usize,
    pub shots: usize,
    pub intra_class_sigma: f64,
    pub modality_gap_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let counts = [
            ("dim", self.dim),
            ("base_classes", self.base_classes),
            ("novel_tasks", self.novel_tasks),
            ("classes_per_novel_task", self.classes_per_novel_task),
            ("train_per_base_class", self.train_per_base_class),
            ("test_per_class", self.test_per_class),
            ("shots", self.shots),
        ];
        for (field, n) in counts {
            if n == 0 {
                return Err(EmbeddingError::InvalidConfig {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        for (field, s) in [
            ("intra_class_sigma", self.intra_class_sigma),
            ("modality_gap_sigma", self.modality_gap_sigma),
        ] {
            if !s.is_finite() || s < 0.0 {
                return Err(EmbeddingError::InvalidConfig {
                    field,
                    reason: format!("must be a finite value >= 0, got {s}"),
                });
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.novel_tasks * self.classes_per_novel_task
    }
}

fn gaussian_vec(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

/// Perturbs a unit `mean` by isotropic noise and renormalizes. A draw that
/// lands exactly on the origin falls back to the mean itself.
fn perturbed(rng: &mut SplitMix64, mean: &[f64], sigma: f64) -> Vec<f64> {
    let noise = gaussian_vec(rng, mean.len());
    let v: Vec<f64> = mean.iter().zip(noise).map(|(m, n)| m + sigma * n).collect();
    l2_normalize(&v).unwrap_or_else(|_| mean.to_vec())
}

/// Generates a task stream and its prototypes from one seeded stream.
///
/// Draw order per class, in class-id order: the mean direction (`dim`
/// normals, normalized), the prototype noise, each train sample's noise, then
/// each test sample's noise.
pub fn generate_synthetic(
    cfg: &SynthConfig,
) -> Result<(EmbeddingSet, PrototypeSet), EmbeddingError> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut records = Vec::new();
    let mut prototypes = Vec::new();

    let mut class_id: ClassId = 0;
    let task_shapes = std::iter::once((0u32, cfg.base_classes, cfg.train_per_base_class)).chain(
        (1..=cfg.novel_tasks).map(|t| (t as u32, cfg.classes_per_novel_task, cfg.shots)),
    );
    for (task, classes, train_per_class) in task_shapes {
        for _ in 0..classes {
            let mean = loop {
                let raw = gaussian_vec(&mut rng, cfg.dim);
                if norm(&raw) > 1e-12 {
                    break l2_normalize(&raw).expect("nonzero");
                }
            };
            prototypes.push(ClassPrototype {
                class_id,
                vector: perturbed(&mut rng, &mean, cfg.modality_gap_sigma),
                prompt_text: Some(format!("a point cloud of class {class_id}")),
            });
            for (split, n) in [(Split::Train, train_per_class), (Split::Test, cfg.test_per_class)] {
                for _ in 0..n {
                    records.push(SampleRecord {
                        vector: perturbed(&mut rng, &mean, cfg.intra_class_sigma),
                        label: class_id,
                        task,
                        split,
                        class_name: None,
                    });
                }
            }
            class_id += 1;
        }
    }

    let set = EmbeddingSet::new(
        cfg.dim,
        records,
        Provenance::Synthetic {
            seed: cfg.seed,
            config: cfg.clone(),
        },
    )?;
    Ok((set, PrototypeSet::new(cfg.dim, prototypes)?))
}
