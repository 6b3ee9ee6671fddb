//! Exact cosine kNN and mean precision@k.

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, norm, Matrix};

/// Rows below this norm cannot be indexed.
pub const INDEX_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    embeddings: Matrix,
    labels: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionVariant {
    /// `hits / min(n_q, k)`
    Capped,
    /// `hits / k`
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub k: usize,
    pub precision_variant: PrecisionVariant,
    pub skip_unanswerable: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            k: 5,
            precision_variant: PrecisionVariant::Capped,
            skip_unanswerable: true,
        }
    }
}

pub fn build_index(emb: &Matrix, labels: &[u32]) -> Result<RetrievalIndex> {
    if emb.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "build_index labels",
            expected: emb.rows(),
            found: labels.len(),
        });
    }
    Ok(RetrievalIndex {
        embeddings: l2_normalize_rows(emb, INDEX_NORM_FLOOR)?,
        labels: labels.to_vec(),
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Label of the row with id `id` (ids are row positions).
    pub fn label(&self, id: usize) -> u32 {
        self.labels[id]
    }

    /// Ids of the `k` most cosine-similar rows, best first; equal
    /// similarities are ordered by ascending id.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "knn query",
                expected: self.dim(),
                found: query.len(),
            });
        }
        if k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds index size {}",
                self.len()
            )));
        }
        let qn = norm(query);
        if !(qn > 0.0) || !qn.is_finite() {
            return Err(Error::DegenerateRow { row: 0, norm: qn });
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|id| (dot(self.embeddings.row(id), query) / qn, id))
            .collect();
        scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub variant: PrecisionVariant,
    /// Score under `variant`.
    pub score: f64,
    pub capped_score: f64,
    pub plain_score: f64,
    /// `None` for skipped (unanswerable) queries.
    pub per_query_capped: Vec<Option<f64>>,
    pub per_query_plain: Vec<Option<f64>>,
    pub skipped_queries: usize,
    pub index_size: usize,
    pub query_size: usize,
}

/// Mean precision@k of `queries` (embeddings + labels) against `index`.
pub fn mean_precision_at_k(
    index: &RetrievalIndex,
    queries: &FeatureSet,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    if index.is_empty() {
        return Err(Error::invalid("empty index"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    if spec.k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if queries.dim() != index.dim() {
        return Err(Error::DimensionMismatch {
            context: "query embedding width",
            expected: index.dim(),
            found: queries.dim(),
        });
    }
    let mut class_count = std::collections::HashMap::<u32, usize>::new();
    for &l in &index.labels {
        *class_count.entry(l).or_default() += 1;
    }
    let depth = spec.k.min(index.len());
    let mut capped = Vec::with_capacity(queries.len());
    let mut plain = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for (q, &label) in queries.labels().iter().enumerate() {
        let n_q = class_count.get(&label).copied().unwrap_or(0);
        if n_q == 0 {
            if spec.skip_unanswerable {
                skipped += 1;
                capped.push(None);
                plain.push(None);
            } else {
                capped.push(Some(0.0));
                plain.push(Some(0.0));
            }
            continue;
        }
        let top = index.knn(queries.features().row(q), depth)?;
        let hits = top.iter().filter(|&&id| index.labels[id] == label).count() as f64;
        capped.push(Some(hits / n_q.min(spec.k) as f64));
        plain.push(Some(hits / spec.k as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let scored: Vec<f64> = v.iter().flatten().copied().collect();
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        }
    };
    let capped_score = mean(&capped);
    let plain_score = mean(&plain);
    Ok(EvalReport {
        k: spec.k,
        variant: spec.precision_variant,
        score: match spec.precision_variant {
            PrecisionVariant::Capped => capped_score,
            PrecisionVariant::Plain => plain_score,
        },
        capped_score,
        plain_score,
        per_query_capped: capped,
        per_query_plain: plain,
        skipped_queries: skipped,
        index_size: index.len(),
        query_size: queries.len(),
    })
}
