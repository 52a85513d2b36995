//! The influence pipeline: restrict candidates with kNN, obtain s_test once
//! per query, score every candidate as `I(z, z_test) = -s_test·∇L(z)`, and
//! rank.
//!
//! Positive values are harmful (up-weighting `z` raises the test loss),
//! negative ones helpful. Execution has two phases separated by one barrier:
//! LiSSA repetitions, then candidate scoring, each sharded over `workers`
//! threads with index-ordered merging, so results never depend on the
//! worker count.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, Dataset};
use crate::error::{Error, Result};
use crate::lissa::{estimate_ihvp_parallel, ConfigHash, ExactSolver, LissaConfig, STestCache, STestVector};
use crate::model::{GradEvaluator, GradVector, ModelSpec, ParamVector};
use crate::nnindex::{Backend, FeatureIndex};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Largest values first.
    Harmful,
    /// Smallest (most negative) values first.
    Helpful,
    /// Largest magnitudes first.
    Absolute,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Harmful, Mode::Helpful, Mode::Absolute];

    /// Ranking order under this mode, ties by ascending train id.
    pub fn compare(self, a: &InfluenceRecord, b: &InfluenceRecord) -> Ordering {
        let primary = match self {
            Mode::Harmful => b.value.total_cmp(&a.value),
            Mode::Helpful => a.value.total_cmp(&b.value),
            Mode::Absolute => b.value.abs().total_cmp(&a.value.abs()),
        };
        primary.then(a.train_id.cmp(&b.train_id))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Harmful => "harmful",
            Mode::Helpful => "helpful",
            Mode::Absolute => "absolute",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harmful" => Ok(Mode::Harmful),
            "helpful" => Ok(Mode::Helpful),
            "absolute" => Ok(Mode::Absolute),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Source of s_test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Lissa(LissaConfig),
    /// Dense factorization of `H + damping·I`, prepared once per engine.
    Exact { damping: f64 },
}

impl Solver {
    pub fn damping(&self) -> f64 {
        match self {
            Solver::Lissa(c) => c.damping,
            Solver::Exact { damping } => *damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceQueryConfig {
    pub use_knn: bool,
    pub k: usize,
    pub solver: Solver,
    pub mode: Mode,
    /// Number of extremes reported by [`QueryOutcome::top`].
    pub m: usize,
    pub workers: usize,
    pub backend: Backend,
    /// Keep every training gradient in memory (`P·N` floats) across queries.
    pub cache_gradients: bool,
}

impl InfluenceQueryConfig {
    /// Full scan with the given solver.
    pub fn full_scan(solver: Solver) -> Self {
        Self {
            use_knn: false,
            k: usize::MAX,
            solver,
            mode: Mode::Harmful,
            m: 10,
            workers: 1,
            backend: Backend::Exact,
            cache_gradients: false,
        }
    }

    /// kNN restriction to `k` candidates; `m` defaults to `min(k, 10)`.
    pub fn knn(k: usize, solver: Solver) -> Self {
        Self {
            use_knn: true,
            k,
            m: k.min(10),
            ..Self::full_scan(solver)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        if self.use_knn {
            if self.k == 0 {
                return Err(Error::config("k must be at least 1"));
            }
            if self.m > self.k {
                return Err(Error::config(format!("m = {} exceeds k = {}", self.m, self.k)));
            }
        }
        match &self.solver {
            Solver::Lissa(c) => c.validate(),
            Solver::Exact { damping } if !(*damping >= 0.0) => Err(Error::config("damping must be non-negative")),
            Solver::Exact { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub train_id: usize,
    pub test_id: usize,
    pub value: f64,
    /// 0-based position in the kNN candidate list, when kNN was used.
    pub knn_rank: Option<usize>,
    #[serde(skip)]
    pub config_hash: Option<ConfigHash>,
}

/// `-⟨s_test, g⟩`.
pub fn influence_one(s_test: &STestVector, g: &GradVector) -> Result<f64> {
    influence_value(&s_test.values, g)
}

pub fn influence_value(s: &GradVector, g: &GradVector) -> Result<f64> {
    if s.len() != g.len() {
        return Err(Error::config(format!(
            "s_test has {} entries, gradient has {}",
            s.len(),
            g.len()
        )));
    }
    Ok(-s.dot(g))
}

/// Sorts `records` under `mode` (stable, ties by ascending train id).
pub fn rank(records: &mut [InfluenceRecord], mode: Mode) {
    records.sort_by(|a, b| mode.compare(a, b));
}

/// First `min(m, len)` records under `mode`'s order.
pub fn top_influential(records: &[InfluenceRecord], m: usize, mode: Mode) -> Vec<InfluenceRecord> {
    let mut sorted = records.to_vec();
    rank(&mut sorted, mode);
    sorted.truncate(m);
    sorted
}

/// One query: the vector s_test is solved against, plus the feature
/// vectors whose neighbors form the candidate set (one per test point, or
/// one per anchor for batch queries).
#[derive(Debug, Clone)]
pub struct Query {
    pub test_id: usize,
    pub gradient: GradVector,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    /// Every candidate, ranked under the configured mode.
    pub records: Vec<InfluenceRecord>,
    pub s_test: STestVector,
    pub mode: Mode,
    pub m: usize,
}

impl QueryOutcome {
    pub fn top(&self) -> &[InfluenceRecord] {
        &self.records[..self.m.min(self.records.len())]
    }

    /// Values keyed by train id.
    pub fn values(&self) -> BTreeMap<usize, f64> {
        self.records.iter().map(|r| (r.train_id, r.value)).collect()
    }
}

/// Shared state for many queries against one model: the feature index, the
/// prepared dense solver, the s_test cache and the optional gradient cache.
pub struct Engine<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    train: &'a Dataset,
    cfg: InfluenceQueryConfig,
    index: Option<FeatureIndex>,
    exact: Option<ExactSolver>,
    cache: Arc<STestCache>,
    gradients: OnceLock<Vec<GradVector>>,
}

impl<'a> Engine<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector, train: &'a Dataset, cfg: InfluenceQueryConfig) -> Result<Self> {
        Self::with_cache(spec, params, train, cfg, Arc::new(STestCache::in_memory()))
    }

    pub fn with_cache(
        spec: &'a ModelSpec,
        params: &'a ParamVector,
        train: &'a Dataset,
        cfg: InfluenceQueryConfig,
        cache: Arc<STestCache>,
    ) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if train.is_empty() {
            return Err(Error::config("training set must not be empty"));
        }
        if train.dim() != spec.dim {
            return Err(Error::config("training set dimension does not match the model"));
        }
        let index = if cfg.use_knn {
            Some(FeatureIndex::from_model(spec, params, train, cfg.backend)?)
        } else {
            None
        };
        Self::assemble(spec, params, train, cfg, cache, index)
    }

    /// Uses a prebuilt index (for instance from cached features).
    pub fn with_index(
        spec: &'a ModelSpec,
        params: &'a ParamVector,
        train: &'a Dataset,
        cfg: InfluenceQueryConfig,
        cache: Arc<STestCache>,
        index: FeatureIndex,
    ) -> Result<Self> {
        cfg.validate()?;
        if index.len() != train.len() {
            return Err(Error::config("index does not cover the training set"));
        }
        let index = cfg.use_knn.then_some(index);
        Self::assemble(spec, params, train, cfg, cache, index)
    }

    fn assemble(
        spec: &'a ModelSpec,
        params: &'a ParamVector,
        train: &'a Dataset,
        cfg: InfluenceQueryConfig,
        cache: Arc<STestCache>,
        index: Option<FeatureIndex>,
    ) -> Result<Self> {
        let exact = match cfg.solver {
            Solver::Exact { damping } => Some(ExactSolver::new(spec, params, train, damping)?),
            Solver::Lissa(_) => None,
        };
        Ok(Self {
            spec,
            params,
            train,
            cfg,
            index,
            exact,
            cache,
            gradients: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &InfluenceQueryConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &STestCache {
        &self.cache
    }

    pub fn index(&self) -> Option<&FeatureIndex> {
        self.index.as_ref()
    }

    /// Query for a single test point: its loss gradient and features.
    pub fn point_query(&self, z_test: &DataPoint) -> Result<Query> {
        Ok(Query {
            test_id: z_test.id,
            gradient: self.spec.grad(self.params, [z_test])?,
            features: vec![self.spec.features(self.params, z_test)?],
        })
    }

    /// Query for a batch of anchors: the mean anchor gradient, with the
    /// union of every anchor's neighbors as candidates.
    pub fn batch_query(&self, test_id: usize, anchors: &[DataPoint]) -> Result<Query> {
        if anchors.is_empty() {
            return Err(Error::config("anchor batch must not be empty"));
        }
        Ok(Query {
            test_id,
            gradient: self.spec.grad(self.params, anchors)?,
            features: anchors
                .iter()
                .map(|a| self.spec.features(self.params, a))
                .collect::<Result<_>>()?,
        })
    }

    /// `s_test` for `v`, from the cache when possible.
    pub fn s_test(&self, v: &GradVector) -> Result<STestVector> {
        match (&self.cfg.solver, &self.exact) {
            (Solver::Exact { damping }, Some(solver)) => {
                let key = ConfigHash::for_exact(*damping, self.params.values(), v);
                self.cache.get_or_insert_with(key, || {
                    Ok(STestVector {
                        values: solver.solve(v)?,
                        config_hash: key,
                        iterations_used: Vec::new(),
                        converged: Vec::new(),
                    })
                })
            }
            (Solver::Lissa(c), _) => {
                let key = ConfigHash::for_lissa(c, self.params.values(), v);
                self.cache.get_or_insert_with(key, || {
                    estimate_ihvp_parallel(self.spec, self.params, self.train, v, c, self.cfg.workers)
                })
            }
            (Solver::Exact { .. }, None) => unreachable!("exact solver is prepared at construction"),
        }
    }

    /// Candidate training indices with their kNN rank: everything when kNN
    /// is off; otherwise the union of each feature vector's `k` neighbors,
    /// keeping the best rank per id.
    pub fn candidates(&self, features: &[Vec<f64>]) -> Result<Vec<(usize, Option<usize>)>> {
        let Some(index) = &self.index else {
            return Ok(self.train.points().iter().map(|z| (z.id, None)).collect());
        };
        let mut best: BTreeMap<usize, usize> = BTreeMap::new();
        for f in features {
            for (rank, id) in index.query(f, self.cfg.k)?.ids().into_iter().enumerate() {
                best.entry(id).and_modify(|r| *r = (*r).min(rank)).or_insert(rank);
            }
        }
        Ok(best.into_iter().map(|(id, r)| (id, Some(r))).collect())
    }

    fn train_point(&self, id: usize) -> Result<&DataPoint> {
        self.train
            .get(id)
            .ok_or_else(|| Error::config(format!("training id {id} not found")))
    }

    fn cached_gradients(&self) -> Result<&[GradVector]> {
        if let Some(g) = self.gradients.get() {
            return Ok(g);
        }
        let points = self.train.points();
        let grads = parallel::map_blocks(
            points.len(),
            self.cfg.workers,
            || GradEvaluator::new(self.spec, self.params),
            |ev, i| {
                let mut g = vec![0.0; self.params.len()];
                ev.point_grad(&points[i], &mut g)?;
                Ok(GradVector::new(g))
            },
        )?;
        Ok(self.gradients.get_or_init(|| grads))
    }

    /// Scores `candidates` against `s`, sharded over the configured workers.
    pub fn score(&self, test_id: usize, s: &STestVector, candidates: &[(usize, Option<usize>)]) -> Result<Vec<InfluenceRecord>> {
        let make = |id: usize, rank: Option<usize>, value: f64| InfluenceRecord {
            train_id: id,
            test_id,
            value,
            knn_rank: rank,
            config_hash: Some(s.config_hash),
        };
        if self.cfg.cache_gradients {
            let grads = self.cached_gradients()?;
            return candidates
                .iter()
                .map(|&(id, rank)| {
                    let slot = self.slot_of(id)?;
                    let g = &grads[slot];
                    Ok(make(id, rank, influence_one(s, g)?))
                })
                .collect();
        }
        parallel::map_blocks(
            candidates.len(),
            self.cfg.workers,
            || Ok((GradEvaluator::new(self.spec, self.params)?, vec![0.0; self.params.len()])),
            |(ev, g), i| {
                let (id, rank) = candidates[i];
                ev.point_grad(self.train_point(id)?, g)?;
                let value = -crate::model::dot(&s.values.values, g);
                Ok(make(id, rank, value))
            },
        )
    }

    fn slot_of(&self, id: usize) -> Result<usize> {
        let points = self.train.points();
        if points.get(id).is_some_and(|p| p.id == id) {
            return Ok(id);
        }
        points
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| Error::config(format!("training id {id} not found")))
    }

    /// Runs the full pipeline for `q`: s_test (phase one), then scoring of
    /// the candidates (phase two), ranked under the configured mode.
    pub fn run(&self, q: &Query) -> Result<QueryOutcome> {
        if q.gradient.len() != self.params.len() {
            return Err(Error::config("query gradient does not match the parameter count"));
        }
        let s = self.s_test(&q.gradient)?;
        let candidates = self.candidates(&q.features)?;
        let mut records = self.score(q.test_id, &s, &candidates)?;
        for r in &records {
            if !r.value.is_finite() {
                return Err(Error::numeric(format!("influence of train id {} is not finite", r.train_id)));
            }
        }
        rank(&mut records, self.cfg.mode);
        Ok(QueryOutcome {
            records,
            s_test: s,
            mode: self.cfg.mode,
            m: self.cfg.m,
        })
    }

    pub fn query(&self, z_test: &DataPoint) -> Result<QueryOutcome> {
        self.run(&self.point_query(z_test)?)
    }
}

/// One-shot sequential query; builds the index and solver for this call.
/// Returns every candidate ranked under `cfg.mode`.
pub fn influence_query(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    z_test: &DataPoint,
    cfg: &InfluenceQueryConfig,
) -> Result<Vec<InfluenceRecord>> {
    let cfg = InfluenceQueryConfig { workers: 1, ..cfg.clone() };
    Ok(Engine::new(spec, params, train, cfg)?.query(z_test)?.records)
}

/// [`influence_query`] on `workers` threads; identical output.
pub fn influence_query_parallel(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    z_test: &DataPoint,
    cfg: &InfluenceQueryConfig,
    workers: usize,
) -> Result<Vec<InfluenceRecord>> {
    let cfg = InfluenceQueryConfig { workers, ..cfg.clone() };
    Ok(Engine::new(spec, params, train, cfg)?.query(z_test)?.records)
}

/// `train_id,test_id,value,knn_rank`; `knn_rank` is empty without kNN.
pub fn write_records_csv<W: Write>(records: &[InfluenceRecord], mut w: W) -> Result<()> {
    writeln!(w, "train_id,test_id,value,knn_rank")?;
    for r in records {
        match r.knn_rank {
            Some(k) => writeln!(w, "{},{},{},{}", r.train_id, r.test_id, r.value, k)?,
            None => writeln!(w, "{},{},{},", r.train_id, r.test_id, r.value)?,
        }
    }
    Ok(())
}
