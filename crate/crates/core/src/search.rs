//! Exact cosine top-k search over an immutable candidate index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    ids: Vec<String>,
    embeddings: Array2<f64>,
    language: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    /// 1-based.
    pub rank: usize,
    /// Row of the candidate in the index.
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Candidates are rows of `embeddings`, re-normalized to unit length.
pub fn build_index(embeddings: Array2<f64>, ids: Vec<String>) -> Result<Index> {
    if embeddings.nrows() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for {} ids",
            embeddings.nrows(),
            ids.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::ShapeMismatch("index needs at least one candidate".into()));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let embeddings = linalg::normalize_rows(embeddings)
        .map_err(|row| Error::NonFinite(format!("{row} (id {})", ids[row])))?;
    Ok(Index {
        ids,
        embeddings,
        language: None,
    })
}

/// Candidate order for top-k: higher score first, then lower row index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    index: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    // `a < b` when `a` ranks before `b`, so a max-heap keeps the worst kept
    // candidate on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.index.cmp(&other.index))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Index {
    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.language = Some(language.into());
        self
    }

    pub fn language(&self) -> Option<&str> {
        self.language.as_deref()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    /// The `min(k, M)` best candidates by inner product, descending, ties
    /// broken by ascending row index.
    pub fn search_top_k(&self, query: ArrayView1<f64>, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query dim {} vs index dim {}",
                query.len(),
                self.dim()
            )));
        }
        let k = k.min(self.len());
        let mut heap: BinaryHeap<Scored> = BinaryHeap::with_capacity(k + 1);
        for (index, row) in self.embeddings.rows().into_iter().enumerate() {
            let cand = Scored {
                score: linalg::dot(query, row),
                index,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("k >= 1") {
                heap.pop();
                heap.push(cand);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(r, s)| SearchHit {
                rank: r + 1,
                index: s.index,
                id: self.ids[s.index].clone(),
                score: s.score,
            })
            .collect())
    }

    /// Runs independent queries in parallel; results are in query order.
    pub fn search_batch(&self, queries: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<SearchHit>>> {
        (0..queries.nrows())
            .into_par_iter()
            .map(|i| self.search_top_k(queries.row(i), k))
            .collect()
    }

    /// Candidates of `self` followed by those of `other`.
    pub fn concat(&self, other: &Index) -> Result<Index> {
        let embeddings = ndarray::concatenate(Axis(0), &[self.embeddings.view(), other.embeddings.view()])
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let ids = self.ids.iter().chain(&other.ids).cloned().collect();
        build_index(embeddings, ids)
    }

    /// Writes the index as a CCSE embedding file plus id sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_embeddings(path, &linalg::to_f32(&self.embeddings), &self.ids)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Index> {
        let (m, ids) = format::read_embeddings(path)?;
        build_index(linalg::to_f64(&m), ids)
    }
}
