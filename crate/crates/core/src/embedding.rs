//! Vector and metric primitives shared by the acquisition, baseline and
//! evaluation code.
//!
//! Every pairwise distance or similarity evaluated through this module is
//! tallied on an [`EvalCounter`], which is how the per-round acquisition cost
//! is measured.

use std::cell::Cell;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-modality record identifier (position in that modality's visible order).
pub type RecordId = usize;

/// Counts pairwise distance and similarity evaluations.
///
/// Owned by one engine instance and used from a single thread.
#[derive(Debug, Default)]
pub struct EvalCounter {
    dist: Cell<u64>,
    sim: Cell<u64>,
}

/// A point-in-time reading of an [`EvalCounter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub dist_evals: u64,
    pub sim_evals: u64,
}

impl EvalCounts {
    /// Counts accumulated since `earlier`.
    pub fn since(self, earlier: EvalCounts) -> EvalCounts {
        EvalCounts {
            dist_evals: self.dist_evals - earlier.dist_evals,
            sim_evals: self.sim_evals - earlier.sim_evals,
        }
    }
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> EvalCounts {
        EvalCounts {
            dist_evals: self.dist.get(),
            sim_evals: self.sim.get(),
        }
    }

    /// Zeroes both counters. Only the engine calls this, between rounds.
    pub fn reset(&self) {
        self.dist.set(0);
        self.sim.set(0);
    }

    pub(crate) fn add_dist(&self, n: u64) {
        self.dist.set(self.dist.get() + n);
    }

    pub(crate) fn add_sim(&self, n: u64) {
        self.sim.set(self.sim.get() + n);
    }
}

/// Rows of embeddings with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    ids: Vec<RecordId>,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    /// Builds a batch from a flat row-major buffer. Ids must be unique.
    pub fn from_flat(ids: Vec<RecordId>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding batch"));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn from_rows(ids: Vec<RecordId>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(ids, dim, data)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
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

    pub fn ids(&self) -> &[RecordId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // a zero-dim batch has an empty buffer; max(1) only avoids the chunk-size panic
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Position of `id` in this batch.
    pub fn position(&self, id: RecordId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Row-wise unit-norm copy.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.rows() {
            data.extend(l2_normalize(row)?);
        }
        Ok(Self {
            dim: self.dim,
            ids: self.ids.clone(),
            data,
        })
    }

    /// Returns a copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            ids: self.ids.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Sub-batch holding the rows at the given positions, in that order.
    pub fn select_positions(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            ids.push(self.ids[p]);
            data.extend_from_slice(self.row(p));
        }
        Self {
            dim: self.dim,
            ids,
            data,
        }
    }

    /// Sub-batch holding the rows with the given ids, in that order.
    pub fn select_ids(&self, ids: &[RecordId]) -> Result<Self> {
        let positions = ids
            .iter()
            .map(|&id| {
                self.position(id)
                    .ok_or(Error::InvalidArgument(format!("id {id} not in batch")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_positions(&positions))
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector to normalize"));
    }
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn dist_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance; counts one distance evaluation.
pub fn euclidean_dist(a: &[f64], b: &[f64], counter: &EvalCounter) -> Result<f64> {
    check_dims(a, b)?;
    counter.add_dist(1);
    Ok(dist_unchecked(a, b))
}

/// Inner product; counts one similarity evaluation.
pub fn inner_similarity(a: &[f64], b: &[f64], counter: &EvalCounter) -> Result<f64> {
    check_dims(a, b)?;
    counter.add_sim(1);
    Ok(dot(a, b))
}

/// For each query row, the distance to its nearest reference row.
///
/// An empty reference batch yields `+inf` for every query. Adds
/// `queries.len() * refs.len()` to the distance counter.
pub fn min_dists(
    queries: &EmbeddingBatch,
    refs: &EmbeddingBatch,
    counter: &EvalCounter,
) -> Result<Vec<f64>> {
    if !refs.is_empty() && !queries.is_empty() && queries.dim() != refs.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            found: refs.dim(),
        });
    }
    counter.add_dist((queries.len() * refs.len()) as u64);
    Ok(queries
        .rows()
        .map(|q| {
            refs.rows()
                .map(|r| dist_unchecked(q, r))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}
