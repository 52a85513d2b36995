//! Applications of influence scores: error correction by fine-tuning on
//! influential points, the simulatability protocol, and influence-graph
//! export with slice statistics.

mod graph;
mod simulate;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, Dataset};
use crate::engine::{rank, Engine, InfluenceQueryConfig, InfluenceRecord, Mode, Solver};
use crate::error::{Error, Result};
use crate::model::{finetune, ModelSpec, ParamVector};
use crate::nnindex::Backend;
use crate::seed::derive_seed;

pub use graph::{
    export_influence_graph, slice_statistics, GraphEdge, GraphNode, GraphStats, InfluenceGraph, NodeKind, SliceCorrelation,
    SliceStats,
};
pub use simulate::{
    evaluate_point, simulatability_eval, train_simulator, SimCell, SimSelection, SimulatabilityConfig, SimulatabilityReport, Simulator,
};

/// Which source points each correction step fine-tunes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Helpful,
    Harmful,
    Random,
    /// The anchors themselves.
    ZTest,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Helpful => "helpful",
            Selection::Harmful => "harmful",
            Selection::Random => "random",
            Selection::ZTest => "z-test",
        })
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "helpful" => Ok(Selection::Helpful),
            "harmful" => Ok(Selection::Harmful),
            "random" => Ok(Selection::Random),
            "z-test" | "ztest" => Ok(Selection::ZTest),
            _ => Err(Error::config(format!("unknown selection {s:?}; expected helpful, harmful, random or z-test"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub iterations: usize,
    pub anchors_per_iter: usize,
    pub finetune_count: usize,
    pub lr: f64,
    pub selection: Selection,
    /// Score with one s_test per anchor and average, instead of one s_test
    /// for the mean anchor gradient.
    pub per_anchor: bool,
    pub solver: Solver,
    pub use_knn: bool,
    pub k: usize,
    pub backend: Backend,
    pub workers: usize,
    pub seed: u64,
}

impl CorrectionConfig {
    pub const DEFAULT_ITERATIONS: usize = 10;
    pub const DEFAULT_ANCHORS: usize = 10;
    pub const DEFAULT_FINETUNE_COUNT: usize = 10;
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(selection: Selection, solver: Solver) -> Self {
        Self {
            iterations: Self::DEFAULT_ITERATIONS,
            anchors_per_iter: Self::DEFAULT_ANCHORS,
            finetune_count: Self::DEFAULT_FINETUNE_COUNT,
            lr: Self::DEFAULT_LR,
            selection,
            per_anchor: false,
            solver,
            use_knn: false,
            k: usize::MAX,
            backend: Backend::Exact,
            workers: 1,
            seed: 0,
        }
    }

    /// Zero learning rate is accepted: it turns the loop into a no-op that
    /// still exercises selection.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.anchors_per_iter == 0 || self.finetune_count == 0 {
            return Err(Error::config("iterations, anchors per iteration and fine-tune count must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        self.query_config(Mode::Harmful).validate()
    }

    fn query_config(&self, mode: Mode) -> InfluenceQueryConfig {
        let base = if self.use_knn {
            InfluenceQueryConfig::knn(self.k, self.solver.clone())
        } else {
            InfluenceQueryConfig::full_scan(self.solver.clone())
        };
        InfluenceQueryConfig {
            mode,
            m: 1,
            workers: self.workers,
            backend: self.backend,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 0 is the measurement before any update.
    pub iteration: usize,
    pub anchor_ids: Vec<usize>,
    pub selected_ids: Vec<usize>,
    /// Hex digest of the s_test that ranked this step's candidates.
    pub query_hash: Option<String>,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct CorrectionTrace {
    pub steps: Vec<TraceStep>,
    pub final_params: ParamVector,
}

impl CorrectionTrace {
    pub fn last(&self) -> &TraceStep {
        self.steps.last().expect("trace holds the initial measurement")
    }

    /// `iteration,validation_loss,validation_accuracy,eval_loss,eval_accuracy,anchors,selected`
    /// with ids joined by `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,validation_loss,validation_accuracy,eval_loss,eval_accuracy,anchors,selected")?;
        let join = |ids: &[usize]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.iteration,
                s.validation_loss,
                s.validation_accuracy,
                s.eval_loss,
                s.eval_accuracy,
                join(&s.anchor_ids),
                join(&s.selected_ids)
            )?;
        }
        Ok(())
    }
}

/// Anchors for iteration `t`; depends only on the seed and `t`, never on
/// how many iterations run.
pub fn iteration_anchors(validation: &Dataset, count: usize, seed: u64, t: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("anchors/{t}")));
    let pts = validation.points();
    let mut picks: Vec<usize> = sample(&mut rng, pts.len(), count.min(pts.len())).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| pts[i].id).collect()
}

fn random_selection(source: &Dataset, count: usize, seed: u64, t: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("random-selection/{t}")));
    let pts = source.points();
    sample(&mut rng, pts.len(), count.min(pts.len()))
        .into_iter()
        .map(|i| pts[i].id)
        .collect()
}

fn pick(source: &Dataset, ids: &[usize]) -> Result<Vec<DataPoint>> {
    ids.iter()
        .map(|&id| {
            source
                .get(id)
                .cloned()
                .ok_or_else(|| Error::config(format!("id {id} not in dataset")))
        })
        .collect()
}

/// Candidates ranked under `mode`, together with the hash of the s_test used
/// (batch mode only).
fn ranked_candidates(
    spec: &ModelSpec,
    params: &ParamVector,
    source: &Dataset,
    anchors: &[DataPoint],
    cfg: &CorrectionConfig,
    mode: Mode,
) -> Result<(Vec<InfluenceRecord>, Option<String>)> {
    let engine = Engine::new(spec, params, source, cfg.query_config(mode))?;
    let q = engine.batch_query(usize::MAX, anchors)?;
    if !cfg.per_anchor {
        let out = engine.run(&q)?;
        return Ok((out.records, Some(out.s_test.config_hash.to_hex())));
    }
    let candidates = engine.candidates(&q.features)?;
    let mut totals: BTreeMap<usize, (f64, Option<usize>)> = BTreeMap::new();
    for a in anchors {
        let s = engine.s_test(&spec.grad(params, [a])?)?;
        for r in engine.score(usize::MAX, &s, &candidates)? {
            let e = totals.entry(r.train_id).or_insert((0.0, r.knn_rank));
            e.0 += r.value / anchors.len() as f64;
        }
    }
    let mut records: Vec<InfluenceRecord> = totals
        .into_iter()
        .map(|(id, (value, knn_rank))| InfluenceRecord {
            train_id: id,
            test_id: usize::MAX,
            value,
            knn_rank,
            config_hash: None,
        })
        .collect();
    rank(&mut records, mode);
    Ok((records, None))
}

fn select_signed(records: &[InfluenceRecord], count: usize, selection: Selection) -> Result<Vec<usize>> {
    let keep = |v: f64| match selection {
        Selection::Helpful => v < 0.0,
        _ => v > 0.0,
    };
    let ids: Vec<usize> = records
        .iter()
        .take_while(|r| keep(r.value))
        .take(count)
        .map(|r| r.train_id)
        .collect();
    if ids.is_empty() {
        return Err(Error::SelectionExhausted(selection.to_string()));
    }
    Ok(ids)
}

/// Iterative correction: each iteration samples anchors from `validation`,
/// ranks `source` by influence on the anchors' loss at the current
/// parameters, takes one fine-tuning step on the selected points with
/// their true labels, and records losses and accuracies.
pub fn correction_loop(
    spec: &ModelSpec,
    params: &ParamVector,
    source: &Dataset,
    validation: &Dataset,
    evaldata: &Dataset,
    cfg: &CorrectionConfig,
) -> Result<CorrectionTrace> {
    cfg.validate()?;
    spec.validate()?;
    if source.is_empty() || validation.is_empty() || evaldata.is_empty() {
        return Err(Error::config("source, validation and evaluation sets must be non-empty"));
    }
    for d in [source, validation, evaldata] {
        if d.dim() != spec.dim {
            return Err(Error::config(format!("{} set dimension does not match the model", d.role())));
        }
    }
    let measure = |p: &ParamVector, iteration: usize, anchor_ids: Vec<usize>, selected_ids: Vec<usize>, query_hash| -> Result<TraceStep> {
        let (validation_loss, validation_accuracy) = spec.evaluate(p, validation.points())?;
        let (eval_loss, eval_accuracy) = spec.evaluate(p, evaldata.points())?;
        Ok(TraceStep {
            iteration,
            anchor_ids,
            selected_ids,
            query_hash,
            validation_loss,
            validation_accuracy,
            eval_loss,
            eval_accuracy,
        })
    };

    let mut current = params.clone();
    let mut steps = vec![measure(&current, 0, Vec::new(), Vec::new(), None)?];
    for t in 0..cfg.iterations {
        let anchor_ids = iteration_anchors(validation, cfg.anchors_per_iter, cfg.seed, t);
        let anchors = pick(validation, &anchor_ids)?;
        let (selected_ids, query_hash, points) = match cfg.selection {
            Selection::ZTest => (anchor_ids.clone(), None, anchors.clone()),
            Selection::Random => {
                let ids = random_selection(source, cfg.finetune_count, cfg.seed, t);
                let pts = pick(source, &ids)?;
                (ids, None, pts)
            }
            Selection::Helpful | Selection::Harmful => {
                let mode = if cfg.selection == Selection::Helpful { Mode::Helpful } else { Mode::Harmful };
                let (records, hash) = ranked_candidates(spec, &current, source, &anchors, cfg, mode)?;
                let ids = select_signed(&records, cfg.finetune_count, cfg.selection)?;
                let pts = pick(source, &ids)?;
                (ids, hash, pts)
            }
        };
        current = finetune(spec, &current, &points, cfg.lr, 1)?;
        steps.push(measure(&current, t + 1, anchor_ids, selected_ids, query_hash)?);
    }
    Ok(CorrectionTrace {
        steps,
        final_params: current,
    })
}
