//! Training-free dual cache.
//!
//! Two per-class key-value stores sit beside the frozen relation scorer:
//!
//! * the base cache holds unit-norm test features with their pseudo-labels,
//!   admitted while the class queue has room and afterwards only by evicting
//!   the queue's highest-entropy entry when the newcomer's entropy is
//!   strictly lower;
//! * the novel cache holds the K labelled shots of each novel class.
//!
//! At prediction time both stores are pooled into one key matrix `Q` with
//! one-hot values `L`. The cache vector is `b = A(v·Qᵀ)·L` with
//! `A(u) = exp(-β(1 - u))`, and the final score is `z = a + α·b`, where `a`
//! is the sigmoid output of the scorer.
//!
//! Classes are addressed by their position in the canonical class order
//! (the order in which classes were revealed), not by raw class id.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{score_all, AlignmentError, RelationParams, SimilarityVector};
use crate::numerics::{argmax, dot, entropy, softmax};

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_CAPACITY: usize = 5;
pub const DEFAULT_SHOTS: usize = 5;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("class {class} already holds {shots} novel shots")]
    ShotCapacityExceeded { class: usize, shots: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cached class {class} outside the {classes} classes queried")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    BasePseudo,
    NovelShot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: Vec<f64>,
    pub class: usize,
    /// Softmax entropy of the logits that produced the pseudo-label; zero for
    /// novel shots.
    pub entropy: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseUpdatePolicy {
    /// Insert only while streaming the base session.
    #[default]
    Session0Only,
    /// Insert whenever the pseudo-label is a base class.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    HighEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Inserted,
    Replaced(CacheEntry),
    Rejected(RejectReason),
}

/// Arg-max of the logits (ties to the lowest index) and the entropy of their
/// softmax.
pub fn pseudo_label(sim: &SimilarityVector) -> (usize, f64) {
    (argmax(&sim.logits), entropy(&softmax(&sim.logits)))
}

/// `exp(-beta * (1 - u))`.
pub fn affinity(u: f64, beta: f64) -> f64 {
    (-beta * (1.0 - u)).exp()
}

/// `a + alpha * b`.
pub fn fuse(a: &SimilarityVector, b: &[f64], alpha: f64) -> Result<Vec<f64>, CacheError> {
    if a.scores.len() != b.len() {
        return Err(CacheError::DimMismatch {
            expected: a.scores.len(),
            got: b.len(),
        });
    }
    Ok(a.scores.iter().zip(b).map(|(a, b)| a + alpha * b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualCache {
    capacity: usize,
    shots: usize,
    policy: BaseUpdatePolicy,
    base: BTreeMap<usize, Vec<CacheEntry>>,
    novel: BTreeMap<usize, Vec<CacheEntry>>,
}

impl DualCache {
    pub fn new(capacity: usize, shots: usize, policy: BaseUpdatePolicy) -> Self {
        Self {
            capacity,
            shots,
            policy,
            base: BTreeMap::new(),
            novel: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn policy(&self) -> BaseUpdatePolicy {
        self.policy
    }

    pub fn base_entries(&self, class: usize) -> &[CacheEntry] {
        self.base.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn novel_entries(&self, class: usize) -> &[CacheEntry] {
        self.novel.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Every entry, base before novel, each in class then arrival order.
    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.base.values().chain(self.novel.values()).flatten()
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entropy-gated admission of a test feature under its pseudo-label.
    pub fn try_insert_base(&mut self, key: &[f64], sim: &SimilarityVector) -> InsertOutcome {
        let (class, h) = pseudo_label(sim);
        self.insert_base_labelled(key, class, h)
    }

    /// Admission rule with the pseudo-label already computed.
    pub fn insert_base_labelled(&mut self, key: &[f64], class: usize, entropy: f64) -> InsertOutcome {
        let entry = CacheEntry {
            key: key.to_vec(),
            class,
            entropy,
            origin: Origin::BasePseudo,
        };
        let queue = self.base.entry(class).or_default();
        if queue.len() < self.capacity {
            queue.push(entry);
            return InsertOutcome::Inserted;
        }
        // First entry holding the maximum entropy.
        let Some(worst) = queue
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, e)| match best {
                Some((_, h)) if e.entropy <= h => best,
                _ => Some((i, e.entropy)),
            })
        else {
            return InsertOutcome::Rejected(RejectReason::HighEntropy);
        };
        if entropy < worst.1 {
            let evicted = queue.remove(worst.0);
            queue.push(entry);
            InsertOutcome::Replaced(evicted)
        } else {
            InsertOutcome::Rejected(RejectReason::HighEntropy)
        }
    }

    pub fn insert_novel(&mut self, key: &[f64], class: usize) -> Result<(), CacheError> {
        let queue = self.novel.entry(class).or_default();
        if queue.len() >= self.shots {
            return Err(CacheError::ShotCapacityExceeded {
                class,
                shots: self.shots,
            });
        }
        queue.push(CacheEntry {
            key: key.to_vec(),
            class,
            entropy: 0.0,
            origin: Origin::NovelShot,
        });
        Ok(())
    }

    /// `b[c] = Σ_{entries of class c} exp(-β(1 - v·key))` over base and novel
    /// entries pooled. An empty cache yields zeros.
    pub fn cache_predict(&self, v: &[f64], beta: f64, classes: usize) -> Result<Vec<f64>, CacheError> {
        let mut b = vec![0.0; classes];
        for e in self.entries() {
            if e.key.len() != v.len() {
                return Err(CacheError::DimMismatch {
                    expected: e.key.len(),
                    got: v.len(),
                });
            }
            let slot = b.get_mut(e.class).ok_or(CacheError::ClassOutOfRange {
                class: e.class,
                classes,
            })?;
            *slot += affinity(dot(v, &e.key).clamp(-1.0, 1.0), beta);
        }
        Ok(b)
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot(Arc::new(self.clone()))
    }

    pub fn stats(&self) -> CacheStats {
        let base: Vec<&CacheEntry> = self.base.values().flatten().collect();
        let mean_base_entropy = if base.is_empty() {
            None
        } else {
            Some(base.iter().map(|e| e.entropy).sum::<f64>() / base.len() as f64)
        };
        CacheStats {
            base_entries: base.len(),
            novel_entries: self.novel.values().map(Vec::len).sum(),
            base_classes_filled: self.base.values().filter(|q| !q.is_empty()).count(),
            mean_base_entropy,
        }
    }

    /// Audit dump: per-class entries with a short digest of each key.
    pub fn dump(&self) -> CacheDump {
        let mut classes: BTreeMap<usize, Vec<EntryDigest>> = BTreeMap::new();
        for e in self.entries() {
            classes.entry(e.class).or_default().push(EntryDigest {
                class: e.class,
                origin: e.origin,
                entropy: e.entropy,
                key_digest: KeyDigest::of(&e.key),
            });
        }
        CacheDump {
            capacity: self.capacity,
            shots: self.shots,
            classes: classes.into_iter().map(|(class, entries)| ClassEntries { class, entries }).collect(),
        }
    }
}

/// Read-only shared view of a cache, safe to hand to concurrent scorers.
#[derive(Debug, Clone)]
pub struct CacheSnapshot(Arc<DualCache>);

impl std::ops::Deref for CacheSnapshot {
    type Target = DualCache;
    fn deref(&self) -> &DualCache {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub base_entries: usize,
    pub novel_entries: usize,
    pub base_classes_filled: usize,
    pub mean_base_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyDigest {
    pub head: Vec<f64>,
    /// FNV-1a over the little-endian bytes of every key component.
    pub hash: String,
}

impl KeyDigest {
    pub fn of(key: &[f64]) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in key {
            for byte in x.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Self {
            head: key.iter().take(4).copied().collect(),
            hash: format!("{h:016x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDigest {
    pub class: usize,
    pub origin: Origin,
    pub entropy: f64,
    pub key_digest: KeyDigest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntries {
    pub class: usize,
    pub entries: Vec<EntryDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDump {
    pub capacity: usize,
    pub shots: usize,
    pub classes: Vec<ClassEntries>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sim: SimilarityVector,
    pub cache_scores: Vec<f64>,
    pub fused: Vec<f64>,
    pub class: usize,
}

/// Cache retrieval and fusion on top of an already computed similarity
/// vector.
pub fn predict_with_scores(
    sim: SimilarityVector,
    cache: &DualCache,
    v: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<Prediction, CacheError> {
    let b = cache.cache_predict(v, beta, sim.len())?;
    let z = fuse(&sim, &b, alpha)?;
    let class = argmax(&z);
    Ok(Prediction {
        sim,
        cache_scores: b,
        fused: z,
        class,
    })
}

/// Scores `v` against every prototype, retrieves from the cache and fuses.
/// The cache is only read; callers insert the sample afterwards if at all.
pub fn predict<R: AsRef<[f64]>>(
    params: &RelationParams,
    cache: &DualCache,
    v: &[f64],
    prototypes: &[R],
    alpha: f64,
    beta: f64,
) -> Result<Prediction, CacheError> {
    let sim = score_all(params, v, prototypes)?;
    predict_with_scores(sim, cache, v, alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{init_relation_with, Dense, RelationParams, LEAKY_SLOPE};
    use crate::numerics::l2_normalize;
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    const CLOSED: f64 = 1e-9;
    const ORACLE: f64 = 1e-6;

    fn sim(logits: &[f64]) -> SimilarityVector {
        SimilarityVector::from_logits(logits.to_vec())
    }

    fn unit(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn full_queue(entropies: &[f64]) -> DualCache {
        let mut c = DualCache::new(entropies.len(), 5, BaseUpdatePolicy::Session0Only);
        for (i, &h) in entropies.iter().enumerate() {
            assert_eq!(c.insert_base_labelled(&unit(i, 8), 0, h), InsertOutcome::Inserted);
        }
        c
    }

    #[test]
    fn pseudo_label_examples() {
        // Softmax of [5, 0, 0] and its entropy, computed term by term.
        let denom = 5f64.exp() + 2.0;
        let p = [5f64.exp() / denom, 1.0 / denom, 1.0 / denom];
        let oracle: f64 = p.iter().map(|x| -x * x.ln()).sum();
        let (class, h) = pseudo_label(&sim(&[5.0, 0.0, 0.0]));
        assert_eq!(class, 0);
        assert!((h - oracle).abs() <= ORACLE);
        assert!((h - 0.07987).abs() <= 1e-5);

        let (class, h) = pseudo_label(&sim(&[0.3; 4]));
        assert_eq!(class, 0);
        assert!((h - 4f64.ln()).abs() <= CLOSED);

        assert_eq!(pseudo_label(&sim(&[-2.0])), (0, 0.0));
    }

    #[test]
    fn admission_follows_strict_max_eviction() {
        let mut c = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        assert_eq!(c.insert_base_labelled(&unit(0, 8), 2, 0.3), InsertOutcome::Inserted);

        let mut c = full_queue(&[0.4, 0.7, 0.9, 1.0, 1.2]);
        match c.insert_base_labelled(&unit(7, 8), 0, 0.9) {
            InsertOutcome::Replaced(e) => assert_eq!(e.entropy, 1.2),
            other => panic!("expected replacement, got {other:?}"),
        }
        let mut entropies: Vec<f64> = c.base_entries(0).iter().map(|e| e.entropy).collect();
        entropies.sort_by(f64::total_cmp);
        assert_eq!(entropies, vec![0.4, 0.7, 0.9, 0.9, 1.0]);

        let mut c = full_queue(&[0.4, 0.7, 0.9, 1.0, 1.2]);
        assert_eq!(
            c.insert_base_labelled(&unit(7, 8), 0, 1.2),
            InsertOutcome::Rejected(RejectReason::HighEntropy)
        );
    }

    #[test]
    fn try_insert_base_uses_pseudo_label() {
        let mut c = DualCache::new(2, 5, BaseUpdatePolicy::Session0Only);
        c.try_insert_base(&unit(0, 4), &sim(&[0.0, 3.0, 0.0]));
        assert_eq!(c.base_entries(1).len(), 1);
        assert!(c.base_entries(0).is_empty());
    }

    #[test]
    fn novel_shots_are_bounded() {
        let mut c = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        for class in 10..13 {
            for i in 0..5 {
                c.insert_novel(&unit(i, 8), class).unwrap();
            }
        }
        assert_eq!(c.stats().novel_entries, 15);
        assert!(matches!(
            c.insert_novel(&unit(0, 8), 10),
            Err(CacheError::ShotCapacityExceeded { class: 10, shots: 5 })
        ));
        assert_eq!(c.novel_entries(11)[3].key, unit(3, 8));
        assert_eq!(c.novel_entries(11)[3].origin, Origin::NovelShot);
    }

    #[test]
    fn affinity_examples() {
        assert_eq!(affinity(1.0, 7.5), 1.0);
        assert_eq!(affinity(-0.3, 0.0), 1.0);
        assert!((affinity(0.0, 2.0) - (-2f64).exp()).abs() <= CLOSED);
        assert!((affinity(0.0, 2.0) - 0.13534).abs() <= 1e-5);
    }

    #[test]
    fn cache_predict_examples() {
        let empty = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        assert_eq!(empty.cache_predict(&unit(0, 4), 2.0, 3).unwrap(), vec![0.0; 3]);

        let mut one = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        one.insert_novel(&unit(1, 4), 2).unwrap();
        assert_eq!(one.cache_predict(&unit(1, 4), 2.0, 3).unwrap(), vec![0.0, 0.0, 1.0]);

        // Keys at cosine 1 and 0 from the query; the oracle sums affinities
        // entry by entry.
        let mut two = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        two.insert_novel(&unit(0, 4), 1).unwrap();
        two.insert_base_labelled(&unit(3, 4), 2, 0.1);
        let q = unit(0, 4);
        let mut oracle = [0.0; 3];
        for e in two.entries() {
            let u: f64 = q.iter().zip(&e.key).map(|(a, b)| a * b).sum();
            oracle[e.class] += (-2.0 * (1.0 - u)).exp();
        }
        let b = two.cache_predict(&q, 2.0, 3).unwrap();
        for (x, y) in b.iter().zip(oracle) {
            assert!((x - y).abs() <= ORACLE);
        }
        assert!((b[1] - 1.0).abs() <= CLOSED);
        assert!((b[2] - 0.13534).abs() <= 1e-5);

        assert!(matches!(
            two.cache_predict(&q, 2.0, 2),
            Err(CacheError::ClassOutOfRange { class: 2, classes: 2 })
        ));
        assert!(matches!(
            two.cache_predict(&[1.0, 0.0], 2.0, 3),
            Err(CacheError::DimMismatch { .. })
        ));
    }

    #[test]
    fn fuse_examples() {
        let a = sim(&[-1.3862943611198906, 1.3862943611198906]); // scores 0.2, 0.8
        assert!((a.scores[0] - 0.2).abs() <= 1e-12);
        assert_eq!(fuse(&a, &[5.0, 9.0], 0.0).unwrap(), a.scores);
        let z = fuse(&a, &[1.0, 0.0], 2.0).unwrap();
        assert!((z[0] - 2.2).abs() <= CLOSED && (z[1] - 0.8).abs() <= CLOSED);
        assert_eq!(fuse(&a, &[0.0, 0.0], 3.0).unwrap(), a.scores);
        assert!(matches!(fuse(&a, &[1.0], 1.0), Err(CacheError::DimMismatch { .. })));
    }

    fn zero_params(dim: usize) -> RelationParams {
        let layers = vec![
            Dense { weights: Array2::zeros((4, 2 * dim)), bias: Array1::zeros(4) },
            Dense { weights: Array2::zeros((1, 4)), bias: Array1::zeros(1) },
        ];
        RelationParams::from_layers(dim, LEAKY_SLOPE, layers).unwrap()
    }

    #[test]
    fn predict_reduces_to_scorer_without_cache() {
        let params = init_relation_with(4, &[6, 3], 9);
        let protos: Vec<Vec<f64>> = (0..4).map(|i| unit(i, 4)).collect();
        let v = l2_normalize(&[0.2, 0.9, -0.1, 0.3]).unwrap();
        let empty = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        let p = predict(&params, &empty, &v, &protos, 2.0, 2.0).unwrap();
        assert_eq!(p.class, argmax(&p.sim.scores));

        let mut full = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
        full.insert_novel(&v, 3).unwrap();
        let p0 = predict(&params, &full, &v, &protos, 0.0, 2.0).unwrap();
        assert_eq!(p0.class, argmax(&p0.sim.scores));
    }

    #[test]
    fn cached_shot_adds_alpha_to_its_class() {
        // Zero-parameter scorer: every class scores 0.5, ties to class 0.
        let params = zero_params(4);
        let protos: Vec<Vec<f64>> = (0..3).map(|i| unit(i, 4)).collect();
        let v = unit(2, 4);
        let mut cache = DualCache::new(5, 1, BaseUpdatePolicy::Session0Only);
        let before = predict(&params, &cache, &v, &protos, 2.0, 2.0).unwrap();
        assert_eq!(before.class, 0);
        cache.insert_novel(&v, 2).unwrap();
        let after = predict(&params, &cache, &v, &protos, 2.0, 2.0).unwrap();
        assert!((after.fused[2] - after.sim.scores[2] - 2.0).abs() <= CLOSED);
        assert_eq!(after.class, 2);
    }

    #[test]
    fn dump_lists_every_entry() {
        let mut c = full_queue(&[0.1, 0.2]);
        c.insert_novel(&unit(3, 8), 4).unwrap();
        let dump = c.dump();
        assert_eq!(dump.classes.len(), 2);
        assert_eq!(dump.classes[0].entries.len(), 2);
        assert_eq!(dump.classes[1].entries[0].origin, Origin::NovelShot);
        assert_eq!(dump.classes[1].entries[0].key_digest.head, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dump.classes[1].entries[0].key_digest.hash.len(), 16);
        let json = serde_json::to_string(&dump).unwrap();
        assert!(json.contains("\"novel_shot\""));
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
            .prop_map(|v| l2_normalize(&v).unwrap())
    }

    proptest! {
        #[test]
        fn alpha_zero_keeps_argmax(scores in prop::collection::vec(-5.0f64..5.0, 1..8), seed in 0u64..1000) {
            let a = sim(&scores);
            let b: Vec<f64> = (0..scores.len()).map(|i| ((i as u64 * 31 + seed) % 17) as f64).collect();
            prop_assert_eq!(argmax(&fuse(&a, &b, 0.0).unwrap()), argmax(&a.scores));
        }

        #[test]
        fn cache_scores_shrink_as_beta_grows(
            keys in prop::collection::vec(unit_vec(6), 1..10),
            q in unit_vec(6),
            beta in 0.0f64..5.0,
            extra in 0.0f64..5.0,
        ) {
            let mut c = DualCache::new(20, 20, BaseUpdatePolicy::Session0Only);
            for (i, k) in keys.iter().enumerate() {
                c.insert_novel(k, i % 3).unwrap();
            }
            let lo = c.cache_predict(&q, beta, 3).unwrap();
            let hi = c.cache_predict(&q, beta + extra, 3).unwrap();
            for (l, h) in lo.iter().zip(hi) {
                prop_assert!(h <= l + 1e-12);
            }
        }

        #[test]
        fn duplicated_entry_doubles_contribution(key in unit_vec(5), q in unit_vec(5), beta in 0.0f64..4.0) {
            let mut one = DualCache::new(5, 5, BaseUpdatePolicy::Session0Only);
            one.insert_novel(&key, 1).unwrap();
            let mut two = one.clone();
            two.insert_novel(&key, 1).unwrap();
            let b1 = one.cache_predict(&q, beta, 2).unwrap();
            let b2 = two.cache_predict(&q, beta, 2).unwrap();
            prop_assert!((b2[1] - 2.0 * b1[1]).abs() <= 1e-12);
            prop_assert_eq!(b2[0], 0.0);
        }
    }
}
