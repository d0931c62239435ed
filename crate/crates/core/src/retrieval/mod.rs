//! Exact cosine index with a bilinear second-stage reranker.
//!
//! Vectors are stored as `f32` (the persisted width); all scoring is done in
//! `f64` from the stored values, so a saved and reloaded index scores
//! identically. Every ordering breaks ties by ascending record id.

mod store;

use std::collections::HashMap;

use serde::Serialize;

use crate::casemodel::{CaseRecord, LabelSet, PreprocessStats};
use crate::encoder::{EncoderError, EncoderParams};
use crate::linalg::{dot, Matrix};

pub use store::{index_load, index_save, read_index, write_index, INDEX_FORMAT_VERSION, INDEX_MAGIC};

/// Default first-stage candidate cap.
pub const DEFAULT_N1: usize = 1000;
/// Default number of auxiliary cases kept after reranking.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("id {0:?} is already indexed")]
    DuplicateId(String),
    #[error("vector has dimension {found}, index expects {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index i/o: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub vector: Vec<f32>,
    pub labels: LabelSet,
    pub digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    d: usize,
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(d: usize) -> Self {
        Self { d, entries: Vec::new(), by_id: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Append an entry. `vector` should be unit-norm; it is stored as given
    /// (rounded to `f32`).
    pub fn add(&mut self, id: &str, vector: &[f64], labels: LabelSet, digest: [u8; 32]) -> Result<(), RetrievalError> {
        if vector.len() != self.d {
            return Err(RetrievalError::DimensionMismatch { found: vector.len(), expected: self.d });
        }
        if self.by_id.contains_key(id) {
            return Err(RetrievalError::DuplicateId(id.to_string()));
        }
        self.by_id.insert(id.to_string(), self.entries.len());
        self.entries.push(IndexEntry {
            id: id.to_string(),
            vector: vector.iter().map(|&v| v as f32).collect(),
            labels,
            digest,
        });
        Ok(())
    }

    /// Stored vector widened back to `f64`.
    pub fn vector(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|e| widen(&e.vector))
    }

    /// Exhaustive top-`min(n1, len)` by dot product.
    pub fn search(&self, query: &[f64], n1: usize) -> Result<Vec<Candidate>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.d {
            return Err(RetrievalError::DimensionMismatch { found: query.len(), expected: self.d });
        }
        let mut all: Vec<Candidate> = self
            .entries
            .iter()
            .map(|e| Candidate { id: e.id.clone(), cosine: dot_mixed(query, &e.vector), rerank: None })
            .collect();
        all.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then_with(|| a.id.cmp(&b.id)));
        all.truncate(n1.max(1));
        Ok(all)
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn dot_mixed(q: &[f64], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(a, b)| a * f64::from(*b)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub id: String,
    pub cosine: f64,
    /// Set once the candidate has been through [`rerank`].
    pub rerank: Option<f64>,
}

impl Candidate {
    /// Rerank score if present, otherwise cosine.
    pub fn score(&self) -> f64 {
        self.rerank.unwrap_or(self.cosine)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RetrievedSet {
    pub items: Vec<Candidate>,
    pub k_requested: usize,
}

impl RetrievedSet {
    pub fn k_actual(&self) -> usize {
        self.items.len()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Bilinear reranker `s(q, c) = qᵀ M c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    pub m: Matrix,
    pub trainable: bool,
}

impl RerankerParams {
    pub fn identity(d: usize) -> Self {
        Self { m: Matrix::identity(d), trainable: false }
    }

    pub fn score(&self, q: &[f64], c: &[f64]) -> f64 {
        dot(q, &self.m.matvec(c))
    }
}

/// Score every candidate with `params` and keep the top `k`.
/// `vector_of` supplies the stored vector for a candidate id.
pub fn rerank<F>(query: &[f64], candidates: &[Candidate], params: &RerankerParams, k: usize, vector_of: F) -> RetrievedSet
where
    F: Fn(&str) -> Vec<f64>,
{
    let mq = params.m.matvec_t(query);
    let mut scored: Vec<Candidate> = candidates
        .iter()
        .map(|c| Candidate { rerank: Some(dot(&mq, &vector_of(&c.id))), ..c.clone() })
        .collect();
    scored.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(k);
    RetrievedSet { items: scored, k_requested: k }
}

/// Two-stage retrieval for an already embedded query.
pub fn retrieve_vector(
    query: &[f64],
    exclude: Option<&str>,
    index: &VectorIndex,
    reranker: &RerankerParams,
    k: usize,
    n1: Option<usize>,
) -> Result<RetrievedSet, RetrievalError> {
    let n1 = n1.unwrap_or_else(|| DEFAULT_N1.min(index.len()));
    // one extra slot so self-exclusion does not shrink the candidate pool
    let extra = usize::from(exclude.is_some_and(|id| index.contains(id)));
    let mut cands = index.search(query, n1 + extra)?;
    if let Some(id) = exclude {
        cands.retain(|c| c.id != id);
    }
    cands.truncate(n1);
    if cands.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    Ok(rerank(query, &cands, reranker, k, |id| index.vector(id).expect("candidate came from index")))
}

/// Embed `record` and retrieve its top-`k` neighbours, excluding itself.
pub fn retrieve(
    record: &CaseRecord,
    index: &VectorIndex,
    encoder: &EncoderParams,
    stats: Option<&PreprocessStats>,
    reranker: &RerankerParams,
    k: usize,
    n1: Option<usize>,
) -> Result<RetrievedSet, RetrievalError> {
    let q = encoder.embed_cls(record, stats)?;
    retrieve_vector(&q.vector, Some(record.id()), index, reranker, k, n1)
}

/// Index every record under `encoder`, in the given order.
pub fn build_index(
    records: &[CaseRecord],
    encoder: &EncoderParams,
    stats: Option<&PreprocessStats>,
) -> Result<VectorIndex, RetrievalError> {
    let mut index = VectorIndex::new(encoder.d());
    for r in records {
        let e = encoder.embed_cls(r, stats)?;
        index.add(r.id(), &e.vector, r.labels, r.narrative_digest())?;
    }
    Ok(index)
}

/// Index plus the records it was built from, looked up by id.
#[derive(Debug, Clone)]
pub struct CaseBase {
    pub index: VectorIndex,
    records: HashMap<String, CaseRecord>,
}

impl CaseBase {
    pub fn build(
        records: Vec<CaseRecord>,
        encoder: &EncoderParams,
        stats: Option<&PreprocessStats>,
    ) -> Result<Self, RetrievalError> {
        let index = build_index(&records, encoder, stats)?;
        Ok(Self { index, records: records.into_iter().map(|r| (r.id().to_string(), r)).collect() })
    }

    /// Pair a loaded index with its records. Records not in the index are
    /// dropped; indexed ids with no record are an error.
    pub fn from_parts(index: VectorIndex, records: Vec<CaseRecord>) -> Result<Self, RetrievalError> {
        let records: HashMap<String, CaseRecord> =
            records.into_iter().filter(|r| index.contains(r.id())).map(|r| (r.id().to_string(), r)).collect();
        if let Some(e) = index.entries().iter().find(|e| !records.contains_key(&e.id)) {
            return Err(RetrievalError::CorruptIndex(format!("no record for indexed id {:?}", e.id)));
        }
        Ok(Self { index, records })
    }

    pub fn empty(d: usize) -> Self {
        Self { index: VectorIndex::new(d), records: HashMap::new() }
    }

    pub fn record(&self, id: &str) -> Option<&CaseRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Records in index insertion order.
    pub fn records(&self) -> impl Iterator<Item = &CaseRecord> {
        self.index.entries().iter().map(|e| &self.records[&e.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = crate::linalg::norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn add_errors() {
        let mut ix = VectorIndex::new(64);
        ix.add("a", &basis(64, 0), LabelSet::EMPTY, [0; 32]).unwrap();
        assert_eq!(ix.len(), 1);
        assert!(matches!(ix.add("a", &basis(64, 1), LabelSet::EMPTY, [0; 32]), Err(RetrievalError::DuplicateId(_))));
        assert!(matches!(
            ix.add("b", &basis(32, 1), LabelSet::EMPTY, [0; 32]),
            Err(RetrievalError::DimensionMismatch { found: 32, expected: 64 })
        ));
    }

    #[test]
    fn empty_search() {
        assert!(matches!(VectorIndex::new(4).search(&basis(4, 0), 3), Err(RetrievalError::EmptyIndex)));
    }

    #[test]
    fn orthogonal_basis() {
        let mut ix = VectorIndex::new(3);
        for (i, id) in ["c", "a", "b"].iter().enumerate() {
            ix.add(id, &basis(3, i), LabelSet::EMPTY, [0; 32]).unwrap();
        }
        let r = ix.search(&basis(3, 1), 3).unwrap();
        assert_eq!(r[0].id, "a");
        assert_eq!(r[0].cosine, 1.0);
        assert_eq!(r[1].id, "b");
        assert_eq!(r[2].id, "c");
        assert_eq!(r[1].cosine, 0.0);
    }

    #[test]
    fn rerank_identity_and_scaled_keep_cosine_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ix = VectorIndex::new(8);
        for i in 0..40 {
            let v = unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
            ix.add(&format!("r{i:02}"), &v, LabelSet::EMPTY, [0; 32]).unwrap();
        }
        let q = unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let cands = ix.search(&q, 20).unwrap();
        let by_cos: Vec<_> = cands.iter().map(|c| c.id.clone()).collect();
        let vec_of = |id: &str| ix.vector(id).unwrap();
        let id1 = rerank(&q, &cands, &RerankerParams::identity(8), 20, vec_of);
        let mut two = RerankerParams::identity(8);
        two.m.scale(2.0);
        let id2 = rerank(&q, &cands, &two, 20, vec_of);
        assert_eq!(id1.ids(), by_cos);
        assert_eq!(id2.ids(), by_cos);
    }

    #[test]
    fn retrieve_vector_excludes_self_and_clamps() {
        let mut ix = VectorIndex::new(2);
        ix.add("a", &[1.0, 0.0], LabelSet::EMPTY, [0; 32]).unwrap();
        ix.add("b", &unit(vec![1.0, 0.2]), LabelSet::EMPTY, [0; 32]).unwrap();
        ix.add("c", &[0.0, 1.0], LabelSet::EMPTY, [0; 32]).unwrap();
        let r = retrieve_vector(&[1.0, 0.0], Some("a"), &ix, &RerankerParams::identity(2), 5, None).unwrap();
        assert_eq!(r.ids(), vec!["b", "c"]);
        let r = retrieve_vector(&[1.0, 0.0], None, &ix, &RerankerParams::identity(2), 5, None).unwrap();
        assert_eq!(r.k_actual(), 3);
        let mut solo = VectorIndex::new(2);
        solo.add("a", &[1.0, 0.0], LabelSet::EMPTY, [0; 32]).unwrap();
        assert!(matches!(
            retrieve_vector(&[1.0, 0.0], Some("a"), &solo, &RerankerParams::identity(2), 5, None),
            Err(RetrievalError::EmptyIndex)
        ));
    }
}
