//! Leave-one-out retraining: the ground-truth oracle for influence signs.
//!
//! Both the baseline and every ablated model start from the same seeded
//! initialization and run the same deterministic trainer, so removing
//! nothing reproduces the baseline bit for bit.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, Dataset};
use crate::engine::{influence_query, InfluenceQueryConfig, Mode, Solver};
use crate::error::{Error, Result};
use crate::model::{fit_from, ModelSpec, Optimizer, ParamVector, TrainConfig};

/// Trainer settings tight enough that retraining differences reflect the
/// data rather than optimizer slack.
pub fn loo_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::Lbfgs { memory: 20 },
        steps: 5000,
        lr: 0.5,
        seed,
        tol: 1e-11,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub test_id: usize,
    /// Selection that produced `removed`, when it came from a ranking.
    pub mode: Option<Mode>,
    pub removed: Vec<usize>,
    pub m_remove: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `loss_after - loss_before`.
    pub delta: f64,
    pub seed: u64,
}

/// A fitted baseline that ablated retrains are compared against.
pub struct LooOracle<'a> {
    spec: &'a ModelSpec,
    train: &'a Dataset,
    cfg: TrainConfig,
    init: ParamVector,
    base: ParamVector,
}

impl<'a> LooOracle<'a> {
    pub fn new(spec: &'a ModelSpec, train: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        let init = spec.init_params(cfg.seed)?;
        let base = fit_from(spec, init.clone(), train.points(), &cfg)?.params;
        Ok(Self {
            spec,
            train,
            cfg,
            init,
            base,
        })
    }

    pub fn base_params(&self) -> &ParamVector {
        &self.base
    }

    /// Retrains without `remove_ids` and reports the loss change at `z_test`.
    pub fn remove(&self, remove_ids: &[usize], z_test: &DataPoint) -> Result<RetrainReport> {
        let known: HashSet<usize> = self.train.ids().collect();
        if let Some(id) = remove_ids.iter().find(|id| !known.contains(id)) {
            return Err(Error::config(format!("cannot remove unknown training id {id}")));
        }
        let unique: HashSet<usize> = remove_ids.iter().copied().collect();
        let loss_before = self.spec.loss(&self.base, z_test)?;
        let loss_after = if unique.is_empty() {
            loss_before
        } else {
            let kept = self.train.without(remove_ids)?;
            let fit = fit_from(self.spec, self.init.clone(), kept.points(), &self.cfg)?;
            self.spec.loss(&fit.params, z_test)?
        };
        Ok(RetrainReport {
            test_id: z_test.id,
            mode: None,
            removed: remove_ids.to_vec(),
            m_remove: unique.len(),
            loss_before,
            loss_after,
            delta: loss_after - loss_before,
            seed: self.cfg.seed,
        })
    }
}

/// One-shot leave-out retraining from `cfg.seed`'s initialization.
pub fn loo_retrain(spec: &ModelSpec, train: &Dataset, remove_ids: &[usize], z_test: &DataPoint, cfg: &TrainConfig) -> Result<RetrainReport> {
    LooOracle::new(spec, train, cfg.clone())?.remove(remove_ids, z_test)
}

/// A single removal compared with the influence prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCheck {
    pub train_id: usize,
    pub influence: f64,
    pub report: RetrainReport,
}

impl SignCheck {
    /// Removing a point shifts its weight by `-1/N`, so to first order the
    /// test loss changes by `-I/N`: helpful points raise it when removed.
    pub fn agrees(&self) -> bool {
        self.influence * self.report.delta < 0.0
    }
}

/// Removes, one at a time, the `per_side` most helpful and most harmful
/// training points for `z_test` (by the dense oracle at the baseline) and
/// retrains after each removal.
pub fn sign_validation(
    spec: &ModelSpec,
    train: &Dataset,
    z_test: &DataPoint,
    per_side: usize,
    damping: f64,
    cfg: &TrainConfig,
) -> Result<Vec<SignCheck>> {
    let oracle = LooOracle::new(spec, train, cfg.clone())?;
    let query = InfluenceQueryConfig::full_scan(Solver::Exact { damping });
    let mut checks = Vec::with_capacity(2 * per_side);
    for mode in [Mode::Helpful, Mode::Harmful] {
        let records = influence_query(spec, oracle.base_params(), train, z_test, &InfluenceQueryConfig { mode, ..query.clone() })?;
        for r in records.iter().take(per_side) {
            let mut report = oracle.remove(&[r.train_id], z_test)?;
            report.mode = Some(mode);
            checks.push(SignCheck {
                train_id: r.train_id,
                influence: r.value,
                report,
            });
        }
    }
    Ok(checks)
}
