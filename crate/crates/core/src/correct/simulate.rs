//! Simulatability: does fine-tuning a simulator on influential points help
//! it predict the task model?
//!
//! The simulator is fit on the training inputs relabeled with the task
//! model's predictions. For a test input `x'` its loss `ℓ` is the
//! cross-entropy against the task prediction. Fine-tuning it for one step on
//! a single training point (true label) gives `ℓ′`; lower `ℓ′` means the
//! point explains the task model's behavior better.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, Dataset, Role};
use crate::engine::{influence_query, InfluenceQueryConfig, Mode, Solver};
use crate::error::{Error, Result};
use crate::model::{finetune, train, ModelSpec, ParamVector, TrainConfig};
use crate::parallel;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimSelection {
    /// Random training points with this true label.
    RandomClass(usize),
    MostHelpful,
    MostHarmful,
}

impl fmt::Display for SimSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimSelection::RandomClass(c) => write!(f, "random-class-{c}"),
            SimSelection::MostHelpful => f.write_str("most-helpful"),
            SimSelection::MostHarmful => f.write_str("most-harmful"),
        }
    }
}

impl FromStr for SimSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most-helpful" | "helpful" => Ok(SimSelection::MostHelpful),
            "most-harmful" | "harmful" => Ok(SimSelection::MostHarmful),
            _ => s
                .strip_prefix("random-class-")
                .and_then(|c| c.parse().ok())
                .map(SimSelection::RandomClass)
                .ok_or_else(|| Error::config(format!("unknown simulatability selection {s:?}"))),
        }
    }
}

impl SimSelection {
    /// Every random class plus both influence extremes.
    pub fn all(classes: usize) -> Vec<Self> {
        (0..classes)
            .map(SimSelection::RandomClass)
            .chain([SimSelection::MostHelpful, SimSelection::MostHarmful])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatabilityConfig {
    pub lrs: Vec<f64>,
    pub selections: Vec<SimSelection>,
    /// Fine-tuning points per selection: the top `repeats` for the influence
    /// extremes, `repeats` random draws otherwise.
    pub repeats: usize,
    pub solver: Solver,
    pub simulator_train: TrainConfig,
    pub workers: usize,
    pub seed: u64,
}

impl SimulatabilityConfig {
    /// `count` learning rates evenly spaced in log space over `[lo, hi]`.
    pub fn log_lrs(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![lo];
        }
        let (a, b) = (lo.log10(), hi.log10());
        (0..count)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
            .collect()
    }

    pub fn new(classes: usize, solver: Solver) -> Self {
        Self {
            lrs: Self::log_lrs(1e-3, 1.0, 12),
            selections: SimSelection::all(classes),
            repeats: 5,
            solver,
            simulator_train: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
            workers: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.selections.is_empty() || self.repeats == 0 {
            return Err(Error::config("simulatability needs learning rates, selections and repeats"));
        }
        if self.lrs.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }
}

/// A simulator fitted to the task model's predictions on the training inputs.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Simulator {
    /// Cross-entropy of the simulator against `target` at `x`.
    pub fn loss_at(&self, params: &ParamVector, x: &[f64], target: usize) -> Result<f64> {
        let p = self.spec.predict_proba(params, x)?;
        let l = -p[target].ln();
        if !l.is_finite() {
            return Err(Error::numeric("simulator probability underflowed"));
        }
        Ok(l)
    }
}

/// Fits a simulator with the task architecture on `{x_i, task(x_i)}`.
pub fn train_simulator(spec_task: &ModelSpec, params_task: &ParamVector, train_set: &Dataset, cfg: &TrainConfig) -> Result<Simulator> {
    let labels = train_set
        .points()
        .iter()
        .map(|z| spec_task.predict(params_task, &z.x))
        .collect::<Result<Vec<_>>>()?;
    let relabeled = train_set.relabeled(&labels, Role::Train)?;
    let params = train(spec_task, &relabeled, cfg)?.params;
    Ok(Simulator {
        spec: spec_task.clone(),
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCell {
    pub selection: SimSelection,
    pub lr: f64,
    pub point_id: usize,
    /// `ℓ′`.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatabilityReport {
    pub test_id: usize,
    pub task_prediction: usize,
    /// Whether the task prediction matches the true label.
    pub correct: bool,
    /// `ℓ` before fine-tuning.
    pub base_loss: f64,
    pub cells: Vec<SimCell>,
}

impl SimulatabilityReport {
    /// Fine-tuning points used for `selection`, in selection order.
    pub fn points(&self, selection: SimSelection) -> Vec<usize> {
        let mut ids = Vec::new();
        for c in self.cells.iter().filter(|c| c.selection == selection) {
            if !ids.contains(&c.point_id) {
                ids.push(c.point_id);
            }
        }
        ids
    }

    /// `min over lrs ℓ′` for one fine-tuning point.
    pub fn best_loss(&self, selection: SimSelection, point_id: usize) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.selection == selection && c.point_id == point_id)
            .map(|c| c.loss)
            .min_by(f64::total_cmp)
    }

    /// Min, mean and max of the per-point best losses for `selection`.
    pub fn band(&self, selection: SimSelection) -> Option<(f64, f64, f64)> {
        let best: Vec<f64> = self
            .points(selection)
            .into_iter()
            .filter_map(|id| self.best_loss(selection, id))
            .collect();
        if best.is_empty() {
            return None;
        }
        let min = best.iter().copied().fold(f64::INFINITY, f64::min);
        let max = best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((min, best.iter().sum::<f64>() / best.len() as f64, max))
    }

    /// Mean best loss over every random-class selection present.
    pub fn random_mean(&self) -> Option<f64> {
        let mut best = Vec::new();
        let mut sels: Vec<SimSelection> = self.cells.iter().map(|c| c.selection).collect();
        sels.sort();
        sels.dedup();
        for s in sels.into_iter().filter(|s| matches!(s, SimSelection::RandomClass(_))) {
            best.extend(self.points(s).into_iter().filter_map(|id| self.best_loss(s, id)));
        }
        (!best.is_empty()).then(|| best.iter().sum::<f64>() / best.len() as f64)
    }

    /// `selection,lr,point_id,loss`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "selection,lr,point_id,loss")?;
        for c in &self.cells {
            writeln!(w, "{},{},{},{}", c.selection, c.lr, c.point_id, c.loss)?;
        }
        Ok(())
    }
}

fn selection_points(
    selection: SimSelection,
    spec_task: &ModelSpec,
    params_task: &ParamVector,
    train_set: &Dataset,
    z_test: &DataPoint,
    cfg: &SimulatabilityConfig,
) -> Result<Vec<usize>> {
    match selection {
        SimSelection::RandomClass(c) => {
            let pool: Vec<usize> = train_set.points().iter().filter(|z| z.y == c).map(|z| z.id).collect();
            let tag = format!("sim/{}/{}", z_test.id, selection);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &tag));
            Ok(sample(&mut rng, pool.len(), cfg.repeats.min(pool.len()))
                .into_iter()
                .map(|i| pool[i])
                .collect())
        }
        SimSelection::MostHelpful | SimSelection::MostHarmful => {
            let mode = if selection == SimSelection::MostHelpful { Mode::Helpful } else { Mode::Harmful };
            let q = InfluenceQueryConfig {
                mode,
                ..InfluenceQueryConfig::full_scan(cfg.solver.clone())
            };
            let records = influence_query(spec_task, params_task, train_set, z_test, &q)?;
            Ok(records.iter().take(cfg.repeats).map(|r| r.train_id).collect())
        }
    }
}

/// Runs the protocol for one test point against a prepared simulator.
pub fn evaluate_point(
    sim: &Simulator,
    spec_task: &ModelSpec,
    params_task: &ParamVector,
    train_set: &Dataset,
    z_test: &DataPoint,
    cfg: &SimulatabilityConfig,
) -> Result<SimulatabilityReport> {
    cfg.validate()?;
    let task_prediction = spec_task.predict(params_task, &z_test.x)?;
    let base_loss = sim.loss_at(&sim.params, &z_test.x, task_prediction)?;
    let mut jobs = Vec::new();
    for &selection in &cfg.selections {
        for id in selection_points(selection, spec_task, params_task, train_set, z_test, cfg)? {
            for &lr in &cfg.lrs {
                jobs.push((selection, id, lr));
            }
        }
    }
    let cells = parallel::map_indexed(jobs.len(), cfg.workers, |i| {
        let (selection, point_id, lr) = jobs[i];
        let z = train_set
            .get(point_id)
            .ok_or_else(|| Error::config(format!("training id {point_id} not found")))?;
        let tuned = finetune(&sim.spec, &sim.params, std::slice::from_ref(z), lr, 1)?;
        Ok::<_, Error>(SimCell {
            selection,
            lr,
            point_id,
            loss: sim.loss_at(&tuned, &z_test.x, task_prediction)?,
        })
    })?;
    Ok(SimulatabilityReport {
        test_id: z_test.id,
        task_prediction,
        correct: task_prediction == z_test.y,
        base_loss,
        cells,
    })
}

/// Trains the simulator, then evaluates `z_test`.
pub fn simulatability_eval(
    spec_task: &ModelSpec,
    params_task: &ParamVector,
    train_set: &Dataset,
    z_test: &DataPoint,
    cfg: &SimulatabilityConfig,
) -> Result<SimulatabilityReport> {
    cfg.validate()?;
    let sim = train_simulator(spec_task, params_task, train_set, &cfg.simulator_train)?;
    evaluate_point(&sim, spec_task, params_task, train_set, z_test, cfg)
}
