//! Embedding vectors, scene records, and cosine geometry.
//!
//! Components are held at 64-bit precision. The on-disk formats store 32-bit
//! floats, so anything loaded from a pool file is exactly representable in
//! `f32`; see [`EmbeddingVector::quantized`].

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding must have at least one component")]
    Empty,
    #[error("component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

/// A finite, non-zero embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    components: Vec<f64>,
    sq_norm: f64,
}

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self, EmbeddingError> {
        if components.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some((index, &value)) = components.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index, value });
        }
        let sq_norm = dot(&components, &components);
        if sq_norm == 0.0 || !sq_norm.is_finite() {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self { components, sq_norm })
    }

    pub fn from_f32(components: &[f32]) -> Result<Self, EmbeddingError> {
        Self::new(components.iter().map(|&c| f64::from(c)).collect())
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm.sqrt()
    }

    /// Rescaled to unit length. Optional: distances are scale invariant.
    pub fn normalized(&self) -> Self {
        let norm = self.norm();
        let components: Vec<f64> = self.components.iter().map(|c| c / norm).collect();
        let sq_norm = dot(&components, &components);
        Self { components, sq_norm }
    }

    /// Rounds every component to the nearest `f32`, the precision of the pool
    /// file formats.
    pub fn quantized(&self) -> Result<Self, EmbeddingError> {
        Self::new(self.components.iter().map(|&c| f64::from(c as f32)).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.components.iter().map(|&c| c as f32).collect()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(value: EmbeddingVector) -> Self {
        value.components
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(similarity_unchecked(a, b))
}

/// Angular distance `arccos(cos_sim(a, b))`, in `[0, π]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_similarity(a, b).map(f64::acos)
}

/// Shared by the pairwise matrix so its entries equal `cosine_distance`
/// bit for bit.
pub(crate) fn similarity_unchecked(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    // sqrt(aa * bb) rather than |a| * |b|: for a == b this is exactly aa, so
    // self-distance is exactly zero. Symmetric in (a, b) bit for bit.
    let denom = a.sq_norm * b.sq_norm;
    let denom = if denom.is_finite() && denom > 0.0 { denom.sqrt() } else { a.norm() * b.norm() };
    let sim = dot(&a.components, &b.components) / denom;
    sim.clamp(-1.0, 1.0)
}

pub(crate) fn distance_unchecked(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    similarity_unchecked(a, b).acos()
}

pub const MAX_DISTANCE: f64 = PI;

/// One element of a scene pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    #[serde(default)]
    pub source_uri: String,
    /// Ground-truth membership labels. Used by the experiment harness and the
    /// mock clients, never by detection itself.
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub embedding: Option<EmbeddingVector>,
}

impl SceneRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), source_uri: String::new(), tags: BTreeSet::new(), embedding: None }
    }

    pub fn with_source(mut self, uri: impl Into<String>) -> Self {
        self.source_uri = uri.into();
        self
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_embedding(mut self, embedding: EmbeddingVector) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("duplicate scene id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: embedding has dim {found}, pool declares {declared}")]
    DimMismatch { id: String, declared: usize, found: usize },
    #[error("pool declares dim 0 but contains records")]
    ZeroDim,
    #[error("record {0:?} has no embedding")]
    MissingEmbedding(String),
    #[error("unknown scene id {0:?}")]
    UnknownId(String),
}

/// An ordered, validated collection of scenes sharing one embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePool {
    dim: usize,
    records: Vec<SceneRecord>,
    index: HashMap<String, usize>,
}

impl ScenePool {
    pub fn new(dim: usize, records: Vec<SceneRecord>) -> Result<Self, PoolError> {
        if dim == 0 && !records.is_empty() {
            return Err(PoolError::ZeroDim);
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            if index.insert(record.id.clone(), i).is_some() {
                return Err(PoolError::DuplicateId(record.id.clone()));
            }
            if let Some(e) = &record.embedding {
                if e.dim() != dim {
                    return Err(PoolError::DimMismatch {
                        id: record.id.clone(),
                        declared: dim,
                        found: e.dim(),
                    });
                }
            }
        }
        Ok(Self { dim, records, index })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, records: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SceneRecord] {
        &self.records
    }

    pub fn get(&self, index: usize) -> Option<&SceneRecord> {
        self.records.get(index)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&SceneRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    pub fn into_records(self) -> Vec<SceneRecord> {
        self.records
    }

    /// Embeddings in pool order; fails on the first record without one.
    pub fn embeddings(&self) -> Result<Vec<&EmbeddingVector>, PoolError> {
        self.records
            .iter()
            .map(|r| r.embedding.as_ref().ok_or_else(|| PoolError::MissingEmbedding(r.id.clone())))
            .collect()
    }

    pub fn is_fully_embedded(&self) -> bool {
        self.records.iter().all(|r| r.embedding.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(c: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_abs_diff_eq!(cosine_similarity(&v(&[3.0, 4.0]), &v(&[3.0, 4.0])).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let sixty = 60f64.to_radians();
        let s = cosine_similarity(&v(&[1.0, 0.0]), &v(&[sixty.cos(), sixty.sin()])).unwrap();
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn distance_examples() {
        let a = v(&[0.2, 0.9, 0.1]);
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_distance(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap(), PI);
        let five = 5f64.to_radians();
        let d = cosine_distance(&v(&[1.0, 0.0]), &v(&[five.cos(), five.sin()])).unwrap();
        assert_abs_diff_eq!(d, 0.087266, epsilon = 1e-6);
    }

    #[test]
    fn near_parallel_overshoot_is_clamped() {
        let a = v(&[0.1, 0.2, 0.3]);
        let b = v(&[0.1 * 3.0, 0.2 * 3.0, 0.3 * 3.0]);
        let d = cosine_distance(&a, &b).unwrap();
        assert!(!d.is_nan());
        assert!(d >= 0.0);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert_eq!(EmbeddingVector::new(vec![]), Err(EmbeddingError::Empty));
        assert_eq!(EmbeddingVector::new(vec![0.0, 0.0]), Err(EmbeddingError::ZeroNorm));
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f64::NAN]),
            Err(EmbeddingError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![f64::INFINITY]),
            Err(EmbeddingError::NonFinite { index: 0, .. })
        ));
        assert_eq!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbeddingError::DimMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn huge_components_do_not_overflow_to_zero_norm() {
        // sum of squares overflows; reject rather than return NaN distances
        assert_eq!(EmbeddingVector::new(vec![1e200, 1e200]), Err(EmbeddingError::ZeroNorm));
    }

    #[test]
    fn pool_validation() {
        let r = |id: &str| SceneRecord::new(id).with_embedding(v(&[1.0, 0.0]));
        assert!(ScenePool::new(2, vec![r("a"), r("b")]).is_ok());
        assert_eq!(ScenePool::new(2, vec![r("a"), r("a")]), Err(PoolError::DuplicateId("a".into())));
        assert!(matches!(ScenePool::new(3, vec![r("a")]), Err(PoolError::DimMismatch { .. })));
        let pool = ScenePool::new(2, vec![r("a"), SceneRecord::new("b")]).unwrap();
        assert_eq!(pool.embeddings().unwrap_err(), PoolError::MissingEmbedding("b".into()));
        assert_eq!(pool.position("b"), Some(1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, dim)
                .prop_filter("non-zero", |c| c.iter().any(|x| x.abs() > 1e-3))
        }

        proptest! {
            #[test]
            fn symmetric_and_in_range((a, b) in (1usize..16).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))) {
                let (a, b) = (v(&a), v(&b));
                let ab = cosine_distance(&a, &b).unwrap();
                let ba = cosine_distance(&b, &a).unwrap();
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
                prop_assert!((0.0..=PI).contains(&ab));
            }

            #[test]
            fn scale_invariant(
                (a, b) in (1usize..16).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d))),
                s in 0.01f64..100.0,
                t in 0.01f64..100.0,
            ) {
                let d0 = cosine_distance(&v(&a), &v(&b)).unwrap();
                let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
                let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
                let d1 = cosine_distance(&v(&sa), &v(&tb)).unwrap();
                // arccos amplifies rounding near 0 and π; stay off those edges
                prop_assume!(d0 > 1e-3 && d0 < PI - 1e-3);
                prop_assert!((d0 - d1).abs() <= 1e-9, "{} vs {}", d0, d1);
            }

            #[test]
            fn planar_distance_is_angle(alpha in -PI..PI, beta in -PI..PI) {
                let mut sep = (alpha - beta).abs();
                if sep > PI { sep = 2.0 * PI - sep; }
                prop_assume!(sep > 1e-3 && sep < PI - 1e-3);
                let d = cosine_distance(&v(&[alpha.cos(), alpha.sin()]), &v(&[beta.cos(), beta.sin()])).unwrap();
                prop_assert!((d - sep).abs() <= 1e-9, "{} vs {}", d, sep);
            }
        }
    }
}
