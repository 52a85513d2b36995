//! ℓ2 nearest-neighbor search over training-point features, used to shrink
//! the influence candidate set to the points closest to the test point.
//!
//! The exact backend is a full scan and is the reference; the graph backend
//! is a seeded hierarchical navigable small-world graph.

mod cache;
mod hnsw;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};

pub use cache::{feature_cache_key, read_features, write_features, FeatureCache, FEATURE_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    /// `m`: links per node on the upper layers (twice that on the base
    /// layer); `ef`: candidate-list width during construction and search.
    Graph { m: usize, ef: usize, seed: u64 },
}

impl Backend {
    pub const DEFAULT_M: usize = 16;
    pub const DEFAULT_EF: usize = 64;

    pub fn graph() -> Self {
        Backend::Graph {
            m: Self::DEFAULT_M,
            ef: Self::DEFAULT_EF,
            seed: 0,
        }
    }
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Exact
    }
}

/// Default candidate count for `n` training points: `max(50, n/10)`, capped at `n`.
pub fn default_k(n: usize) -> usize {
    (n / 10).max(50).min(n)
}

/// Ids with squared distances, ascending by distance then id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub neighbors: Vec<(usize, f64)>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.neighbors.iter().map(|&(id, _)| id).collect()
    }

    /// 0-based position of `id`, if present.
    pub fn rank_of(&self, id: usize) -> Option<usize> {
        self.neighbors.iter().position(|&(i, _)| i == id)
    }
}

/// Total order used everywhere: distance, then id.
fn by_distance(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct FeatureIndex {
    dim: usize,
    ids: Vec<usize>,
    /// Row-major `len × dim`.
    vectors: Vec<f64>,
    backend: Backend,
    graph: Option<hnsw::Graph>,
}

impl FeatureIndex {
    pub fn build(entries: Vec<(usize, Vec<f64>)>, backend: Backend) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::config("cannot index an empty feature set"));
        };
        let dim = first.1.len();
        if dim == 0 {
            return Err(Error::config("feature vectors must not be empty"));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::config(format!("feature of id {id} has dimension {}, expected {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("feature of id {id} is not finite")));
            }
            if !seen.insert(id) {
                return Err(Error::config(format!("duplicate id {id} in feature set")));
            }
            ids.push(id);
            vectors.extend(v);
        }
        let mut index = Self {
            dim,
            ids,
            vectors,
            backend,
            graph: None,
        };
        if let Backend::Graph { m, ef, seed } = backend {
            if m < 2 || ef == 0 {
                return Err(Error::config("graph backend needs m >= 2 and ef >= 1"));
            }
            index.graph = Some(hnsw::Graph::build(&index, m, ef, seed));
        }
        Ok(index)
    }

    /// Indexes `features(z)` for every point of `data` at `params`.
    pub fn from_model(spec: &ModelSpec, params: &ParamVector, data: &Dataset, backend: Backend) -> Result<Self> {
        Self::build(model_features(spec, params, data)?, backend)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub(crate) fn vector(&self, slot: usize) -> &[f64] {
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    pub(crate) fn id(&self, slot: usize) -> usize {
        self.ids[slot]
    }

    /// Stored `(id, vector)` pairs in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        (0..self.len()).map(|s| (self.ids[s], self.vector(s)))
    }

    /// The `k` entries nearest to `q`; `k ≥ N` returns all of them. Exact for
    /// the exact backend, best-effort for the graph.
    pub fn query(&self, q: &[f64], k: usize) -> Result<NeighborSet> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if q.len() != self.dim {
            return Err(Error::config(format!(
                "query has dimension {}, index has {}",
                q.len(),
                self.dim
            )));
        }
        match &self.graph {
            Some(g) if k < self.len() => {
                let mut found = g.search(self, q, k);
                found.sort_by(by_distance);
                found.truncate(k);
                Ok(NeighborSet { neighbors: found })
            }
            _ => Ok(self.scan(q, k)),
        }
    }

    /// Full scan regardless of backend.
    pub fn query_exact(&self, q: &[f64], k: usize) -> Result<NeighborSet> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if q.len() != self.dim {
            return Err(Error::config("query dimension mismatch"));
        }
        Ok(self.scan(q, k))
    }

    fn scan(&self, q: &[f64], k: usize) -> NeighborSet {
        let mut all: Vec<(usize, f64)> = (0..self.len()).map(|s| (self.ids[s], sq_dist(q, self.vector(s)))).collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, by_distance);
            all.truncate(k);
        }
        all.sort_by(by_distance);
        NeighborSet { neighbors: all }
    }
}

/// `(id, features(z))` for every point of `data`.
pub fn model_features(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Vec<(usize, Vec<f64>)>> {
    data.points()
        .iter()
        .map(|z| Ok((z.id, spec.features(params, z)?)))
        .collect()
}

#[cfg(test)]
mod tests;
