//! Few-shot exemplar retrieval by exhaustive cosine similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{JsonEndpoint, ServiceError};
use crate::num::Real;
use crate::rng::{fnv1a, SplitMix64};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("empty index")]
    EmptyIndex,
    #[error("index has {ids} ids but {vectors} vectors")]
    Misaligned { ids: usize, vectors: usize },
    #[error("embedding dimension must be positive")]
    ZeroDim,
}

/// A dense embedding; its dimension is the number of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding<T> {
    pub values: Vec<T>,
}

impl<T: Real> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.is_zero())
    }
}

impl<T> From<Vec<T>> for Embedding<T> {
    fn from(values: Vec<T>) -> Self {
        Self { values }
    }
}

/// Cosine similarity of two raw slices.
pub fn cosine_slices<T: Real>(a: &[T], b: &[T]) -> Result<T, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na.is_zero() || nb.is_zero() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub fn cosine<T: Real>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T, RetrievalError> {
    cosine_slices(&a.values, &b.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexItem<T> {
    pub id: String,
    pub vector: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexFile<T> {
    dim: usize,
    items: Vec<IndexItem<T>>,
}

/// Immutable id-aligned set of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Index<T> {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding<T>>,
}

impl<T: Real> Index<T> {
    pub fn new(ids: Vec<String>, vectors: Vec<Embedding<T>>) -> Result<Self, RetrievalError> {
        if ids.len() != vectors.len() {
            return Err(RetrievalError::Misaligned {
                ids: ids.len(),
                vectors: vectors.len(),
            });
        }
        let dim = vectors.first().map_or(0, Embedding::dim);
        for v in &vectors {
            if v.dim() != dim {
                return Err(RetrievalError::DimMismatch {
                    left: dim,
                    right: v.dim(),
                });
            }
            if dim == 0 {
                return Err(RetrievalError::ZeroDim);
            }
            if v.is_zero() {
                return Err(RetrievalError::ZeroVector);
            }
        }
        Ok(Self { dim, ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Embedding<T>] {
        &self.vectors
    }

    /// The `min(k, len)` most similar items, by descending cosine and then by position.
    pub fn top_k(&self, query: &Embedding<T>, k: usize) -> Result<Vec<(String, T)>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::DimMismatch {
                left: self.dim,
                right: query.dim(),
            });
        }
        let mut scored = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| cosine(v, query).map(|s| (i, s)))
            .collect::<Result<Vec<_>, _>>()?;
        // Stable sort keeps index order among equal scores.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }
}

impl<T: Real + Serialize + serde::de::DeserializeOwned> Index<T> {
    pub fn to_json(&self) -> serde_json::Result<String> {
        let file = IndexFile {
            dim: self.dim,
            items: self
                .ids
                .iter()
                .zip(&self.vectors)
                .map(|(id, v)| IndexItem {
                    id: id.clone(),
                    vector: v.values.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file)
    }

    pub fn from_json(text: &str) -> Result<Self, IndexLoadError> {
        let file: IndexFile<T> = serde_json::from_str(text)?;
        let (ids, vectors): (Vec<_>, Vec<_>) = file
            .items
            .into_iter()
            .map(|item| (item.id, Embedding::new(item.vector)))
            .unzip();
        let index = Self::new(ids, vectors)?;
        if !index.is_empty() && index.dim != file.dim {
            return Err(RetrievalError::DimMismatch {
                left: file.dim,
                right: index.dim,
            }
            .into());
        }
        Ok(Self { dim: file.dim, ..index })
    }
}

#[derive(Debug, Error)]
pub enum IndexLoadError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] RetrievalError),
}

/// Where retrieved exemplars go in the chat prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotOrder {
    #[default]
    MostSimilarFirst,
    MostSimilarLast,
}

impl ShotOrder {
    pub fn arrange<T>(self, mut ranked: Vec<T>) -> Vec<T> {
        if self == ShotOrder::MostSimilarLast {
            ranked.reverse();
        }
        ranked
    }
}

pub trait EmbeddingService: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ServiceError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ServiceError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

#[derive(Serialize)]
struct EmbedBatchRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedBatchResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST /v1/embed`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingClient {
    endpoint: JsonEndpoint,
}

impl HttpEmbeddingClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ServiceError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url)?,
        })
    }
}

impl EmbeddingService for HttpEmbeddingClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ServiceError> {
        let r: EmbedResponse = self.endpoint.post("/v1/embed", &EmbedRequest { text })?;
        Ok(r.vector)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ServiceError> {
        let r: EmbedBatchResponse = self.endpoint.post("/v1/embed", &EmbedBatchRequest { texts })?;
        if r.vectors.len() != texts.len() {
            return Err(ServiceError::Decode(format!(
                "expected {} vectors, got {}",
                texts.len(),
                r.vectors.len()
            )));
        }
        Ok(r.vectors)
    }
}

/// Hash-seeded pseudo-random unit vectors: equal texts map to equal vectors.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl EmbeddingService for MockEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ServiceError> {
        let mut rng = SplitMix64::new(fnv1a(text.as_bytes()));
        let mut v: Vec<f64> = (0..self.dim).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding<f64> {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn cosine_values() {
        assert!((cosine(&e(&[1., 2., 2.]), &e(&[1., 2., 2.])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&e(&[1., 0.]), &e(&[0., 1.])).unwrap(), 0.0);
        assert!((cosine(&e(&[1., 2.]), &e(&[2., 1.])).unwrap() - 0.8).abs() < 1e-15);
        let f: f32 = cosine(&Embedding::new(vec![1f32, 2.]), &Embedding::new(vec![2f32, 1.])).unwrap();
        assert!((f - 0.8).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&e(&[1.]), &e(&[1., 0.])),
            Err(RetrievalError::DimMismatch { left: 1, right: 2 })
        );
        assert_eq!(cosine(&e(&[0., 0.]), &e(&[1., 0.])), Err(RetrievalError::ZeroVector));
    }

    fn basis() -> Index<f64> {
        Index::new(
            vec!["x".into(), "y".into(), "z".into()],
            vec![e(&[1., 0., 0.]), e(&[0., 1., 0.]), e(&[0., 0., 1.])],
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let r = basis().top_k(&e(&[0., 1., 0.]), 1).unwrap();
        assert_eq!(r, vec![("y".to_string(), 1.0)]);
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let r = basis().top_k(&e(&[0., 1., 0.]), 10).unwrap();
        let ids: Vec<_> = r.iter().map(|(id, _)| id.as_str()).collect();
        // x and z tie at 0 and keep index order.
        assert_eq!(ids, ["y", "x", "z"]);
    }

    #[test]
    fn brute_force_ranking_of_three_directions() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let idx = Index::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![e(&[1., 0.]), e(&[s, s]), e(&[0., 1.])],
        )
        .unwrap();
        let r = idx.top_k(&e(&[2., 1.]), 3).unwrap();
        let ids: Vec<_> = r.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        let expected = [3.0 / 10f64.sqrt(), 2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()];
        for ((_, got), want) in r.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((r[0].1 - 0.9487).abs() < 1e-4);
    }

    #[test]
    fn index_errors() {
        let empty = Index::<f64>::new(vec![], vec![]).unwrap();
        assert_eq!(empty.top_k(&e(&[1.]), 1), Err(RetrievalError::EmptyIndex));
        assert!(matches!(
            Index::new(vec!["a".into(), "b".into()], vec![e(&[1.]), e(&[1., 1.])]),
            Err(RetrievalError::DimMismatch { .. })
        ));
        assert_eq!(
            Index::new(vec!["a".into()], vec![e(&[0.])]),
            Err(RetrievalError::ZeroVector)
        );
        assert!(matches!(
            Index::<f64>::new(vec!["a".into()], vec![]),
            Err(RetrievalError::Misaligned { .. })
        ));
        assert!(matches!(
            basis().top_k(&e(&[1.]), 1),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn index_file_round_trip() {
        let idx = basis();
        let json = idx.to_json().unwrap();
        assert!(json.starts_with(r#"{"dim":3,"items":[{"id":"x","vector":[1.0,0.0,0.0]}"#));
        assert_eq!(Index::<f64>::from_json(&json).unwrap(), idx);
        assert!(Index::<f64>::from_json(r#"{"dim":2,"items":[{"id":"a","vector":[1.0]}]}"#).is_err());
    }

    #[test]
    fn shot_order() {
        assert_eq!(ShotOrder::MostSimilarFirst.arrange(vec![1, 2, 3]), [1, 2, 3]);
        assert_eq!(ShotOrder::MostSimilarLast.arrange(vec![1, 2, 3]), [3, 2, 1]);
    }

    #[test]
    fn mock_embedder_is_deterministic_unit_norm() {
        let m = MockEmbedder { dim: 16 };
        let a = m.embed("hello").unwrap();
        assert_eq!(a, m.embed("hello").unwrap());
        assert_ne!(a, m.embed("hello!").unwrap());
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(m.embed_batch(&["hello".into()]).unwrap()[0], a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-5.0f64..5.0, 3).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
        }

        proptest! {
            #[test]
            fn cosine_symmetric_and_scale_invariant(a in vec3(), b in vec3(), s in 0.01f64..100.0) {
                let ab = cosine(&e(&a), &e(&b)).unwrap();
                prop_assert!((ab - cosine(&e(&b), &e(&a)).unwrap()).abs() < 1e-12);
                let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
                prop_assert!((ab - cosine(&e(&scaled), &e(&b)).unwrap()).abs() < 1e-9);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
            }

            #[test]
            fn top_k_is_prefix_of_descending_sort(items in proptest::collection::vec(vec3(), 1..25), q in vec3(), k in 1usize..30) {
                let ids: Vec<String> = (0..items.len()).map(|i| format!("i{i}")).collect();
                let idx = Index::new(ids, items.iter().cloned().map(Embedding::new).collect()).unwrap();
                let r = idx.top_k(&e(&q), k).unwrap();
                prop_assert_eq!(r.len(), k.min(items.len()));
                for w in r.windows(2) {
                    prop_assert!(w[0].1 >= w[1].1);
                }
                let mut distinct: Vec<_> = r.iter().map(|(id, _)| id.clone()).collect();
                distinct.sort();
                distinct.dedup();
                prop_assert_eq!(distinct.len(), r.len());
            }
        }
    }
}
