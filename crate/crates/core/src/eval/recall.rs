//! Recall@m of the kNN candidate set against full-scan ground truth.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::DataPoint;
use crate::data::Dataset;
use crate::engine::{top_influential, Engine, InfluenceQueryConfig, InfluenceRecord, Mode, Solver};
use crate::error::{Error, Result};
use crate::lissa::{default_scale, LissaConfig, MAX_DENSE_PARAMS};
use crate::model::{ModelSpec, ParamVector};
use crate::nnindex::{Backend, FeatureIndex};
use crate::parallel;

/// `|retrieved ∩ truth| / |truth|`.
pub fn recall_at_m(retrieved: &[usize], truth: &[usize]) -> Result<f64> {
    let truth: HashSet<usize> = truth.iter().copied().collect();
    if truth.is_empty() {
        return Err(Error::config("ground-truth set must not be empty"));
    }
    let got: HashSet<usize> = retrieved.iter().copied().collect();
    Ok(truth.intersection(&got).count() as f64 / truth.len() as f64)
}

/// Which test points a report covers, by whether the model predicts them
/// correctly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Correct,
    Incorrect,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::All => "all",
            Split::Correct => "correct",
            Split::Incorrect => "incorrect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub m: usize,
    pub mode: Mode,
    pub split: Split,
    /// `(test_id, recall)` in test-point order.
    pub recalls: Vec<(usize, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Expected recall of `k` uniformly random candidates, `k / N`.
    pub baseline: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Dense oracle when the active parameter count permits, otherwise LiSSA
/// with `B = N/10, J = 2000, T = 4`.
pub fn ground_truth_solver(spec: &ModelSpec, params: &ParamVector, train: &Dataset) -> Result<Solver> {
    let damping = LissaConfig::DEFAULT_DAMPING;
    if spec.active_coordinates().len() <= MAX_DENSE_PARAMS {
        return Ok(Solver::Exact { damping });
    }
    let scale = default_scale(spec, params, train, damping, 0)?;
    Ok(Solver::Lissa(LissaConfig {
        depth: 2000,
        batch_size: (train.len() / 10).max(1),
        repetitions: 4,
        tol: 0.0,
        ..LissaConfig::with_scale(scale)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallConfig {
    pub ks: Vec<usize>,
    pub ms: Vec<usize>,
    pub modes: Vec<Mode>,
    pub solver: Solver,
    pub backend: Backend,
    pub workers: usize,
}

impl RecallConfig {
    pub fn new(ks: Vec<usize>, ms: Vec<usize>, solver: Solver) -> Self {
        Self {
            ks,
            ms,
            modes: Mode::ALL.to_vec(),
            solver,
            backend: Backend::Exact,
            workers: 1,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.ks.is_empty() || self.ms.is_empty() || self.modes.is_empty() {
            return Err(Error::config("recall experiment needs at least one k, m and mode"));
        }
        if self.ks.iter().chain(&self.ms).any(|&v| v == 0) {
            return Err(Error::config("k and m must be positive"));
        }
        if let Some(m) = self.ms.iter().find(|&&m| m > n) {
            return Err(Error::config(format!("m = {m} exceeds the training set size {n}")));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }
}

/// Per test point: full-scan records, kNN order of training ids, and
/// whether the model predicts it correctly.
struct PointTruth {
    test_id: usize,
    records: Vec<InfluenceRecord>,
    neighbors: Vec<usize>,
    correct: bool,
}

/// One report per `(k, m, mode, split)`, ordered by k, then m, then mode,
/// then split. Splits with no test points are omitted.
pub fn recall_experiment(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    test_points: &[DataPoint],
    cfg: &RecallConfig,
) -> Result<Vec<RecallReport>> {
    cfg.validate(train.len())?;
    if test_points.is_empty() {
        return Err(Error::config("recall experiment needs at least one test point"));
    }
    let n = train.len();
    let kmax = cfg.ks.iter().copied().max().unwrap_or(1).min(n);
    let scan = InfluenceQueryConfig::full_scan(cfg.solver.clone());
    let engine = Engine::new(spec, params, train, scan)?;
    let index = FeatureIndex::from_model(spec, params, train, cfg.backend)?;
    let truths = parallel::map_indexed(test_points.len(), cfg.workers, |i| {
        let z = &test_points[i];
        let records = engine.query(z)?.records;
        let neighbors = index.query(&spec.features(params, z)?, kmax)?.ids();
        Ok::<_, Error>(PointTruth {
            test_id: z.id,
            records,
            neighbors,
            correct: spec.predict(params, &z.x)? == z.y,
        })
    })?;

    let mut reports = Vec::new();
    for &k in &cfg.ks {
        for &m in &cfg.ms {
            for &mode in &cfg.modes {
                for split in [Split::All, Split::Correct, Split::Incorrect] {
                    let mut recalls = Vec::new();
                    for t in &truths {
                        let keep = match split {
                            Split::All => true,
                            Split::Correct => t.correct,
                            Split::Incorrect => !t.correct,
                        };
                        if !keep {
                            continue;
                        }
                        let top: Vec<usize> = top_influential(&t.records, m, mode).iter().map(|r| r.train_id).collect();
                        let retrieved = &t.neighbors[..k.min(t.neighbors.len())];
                        recalls.push((t.test_id, recall_at_m(retrieved, &top)?));
                    }
                    if recalls.is_empty() {
                        continue;
                    }
                    let values: Vec<f64> = recalls.iter().map(|r| r.1).collect();
                    let (mean, std) = mean_std(&values);
                    reports.push(RecallReport {
                        k,
                        m,
                        mode,
                        split,
                        recalls,
                        mean,
                        std,
                        baseline: k.min(n) as f64 / n as f64,
                    });
                }
            }
        }
    }
    Ok(reports)
}

/// `k,m,mode,split,count,mean,std,baseline`.
pub fn write_recall_csv<W: std::io::Write>(reports: &[RecallReport], mut w: W) -> Result<()> {
    writeln!(w, "k,m,mode,split,count,mean,std,baseline")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.m,
            r.mode,
            r.split,
            r.recalls.len(),
            r.mean,
            r.std,
            r.baseline
        )?;
    }
    Ok(())
}
