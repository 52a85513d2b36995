//! Deterministic full-batch trainers and the fine-tuning step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{dot, norm, GradEvaluator, ModelSpec, ParamVector};
use crate::data::{DataPoint, Dataset, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Fixed-step full-batch gradient descent at `lr`.
    GradientDescent,
    /// Limited-memory BFGS with Armijo backtracking.
    Lbfgs { memory: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop early once the full-batch gradient norm falls to this value.
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Lbfgs { memory: 10 },
            steps: 500,
            lr: 0.5,
            seed: 0,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Full-batch gradient norm at the returned parameters.
    pub grad_norm: f64,
    pub loss: f64,
    pub steps: usize,
}

/// Fits `spec` to `train` from the seeded initialization.
pub fn train(spec: &ModelSpec, train: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.role() != Role::Train {
        return Err(Error::config(format!("train() needs a train dataset, got {}", train.role())));
    }
    let init = spec.init_params(cfg.seed)?;
    fit_from(spec, init, train.points(), cfg)
}

/// Fits starting at `init`; used by `train` and by leave-one-out retraining.
pub fn fit_from(spec: &ModelSpec, init: ParamVector, points: &[DataPoint], cfg: &TrainConfig) -> Result<TrainOutcome> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::config("cannot train on an empty set"));
    }
    match cfg.optimizer {
        Optimizer::GradientDescent => gradient_descent(spec, init, points, cfg),
        Optimizer::Lbfgs { memory } => lbfgs(spec, init, points, cfg, memory.max(1)),
    }
}

fn objective(spec: &ModelSpec, params: &ParamVector, points: &[DataPoint], step: usize) -> Result<(f64, Vec<f64>)> {
    let loss = spec.mean_loss(params, points).map_err(|e| training_error(e, step))?;
    let g = spec.grad(params, points).map_err(|e| training_error(e, step))?;
    Ok((loss, g.values))
}

fn training_error(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(reason) => Error::Training { step, reason },
        other => other,
    }
}

fn gradient_descent(spec: &ModelSpec, init: ParamVector, points: &[DataPoint], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut params = init;
    let (mut loss, mut g) = objective(spec, &params, points, 0)?;
    let mut steps = 0;
    while steps < cfg.steps && norm(&g) > cfg.tol {
        params = params.axpy(-cfg.lr, &g).map_err(|e| training_error(e, steps + 1))?;
        steps += 1;
        (loss, g) = objective(spec, &params, points, steps)?;
    }
    Ok(TrainOutcome {
        grad_norm: norm(&g),
        params,
        loss,
        steps,
    })
}

fn lbfgs(spec: &ModelSpec, init: ParamVector, points: &[DataPoint], cfg: &TrainConfig, memory: usize) -> Result<TrainOutcome> {
    let mut params = init;
    let (mut loss, mut g) = objective(spec, &params, points, 0)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut steps = 0;

    while steps < cfg.steps && norm(&g) > cfg.tol {
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm(&g).max(1.0),
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut t = 1.0;
        let (next, next_loss, next_g) = loop {
            let cand = params.axpy(t, &dir);
            if let Ok(cand) = cand {
                if let Ok(l) = spec.mean_loss(&cand, points) {
                    if l <= loss + 1e-4 * t * slope {
                        let (l, ng) = objective(spec, &cand, points, steps + 1)?;
                        break (cand, l, ng);
                    }
                    // Near the optimum loss differences drop below rounding;
                    // fall back to requiring a smaller gradient.
                    if (l - loss).abs() <= 1e-14 * loss.abs().max(1.0) {
                        let (l, ng) = objective(spec, &cand, points, steps + 1)?;
                        if norm(&ng) < norm(&g) {
                            break (cand, l, ng);
                        }
                    }
                }
            }
            t *= 0.5;
            if t < 1e-20 {
                // No further decrease is representable; the current iterate is final.
                return Ok(TrainOutcome {
                    grad_norm: norm(&g),
                    params,
                    loss,
                    steps,
                });
            }
        };

        let s: Vec<f64> = next.values().iter().zip(params.values()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        params = next;
        loss = next_loss;
        g = next_g;
        steps += 1;
        if !loss.is_finite() {
            return Err(Error::Training {
                step: steps,
                reason: "loss is not finite".into(),
            });
        }
    }
    Ok(TrainOutcome {
        grad_norm: norm(&g),
        params,
        loss,
        steps,
    })
}

/// `steps` full-batch gradient steps at `lr` on the mean loss over `points`.
pub fn finetune(spec: &ModelSpec, params: &ParamVector, points: &[DataPoint], lr: f64, steps: usize) -> Result<ParamVector> {
    if points.is_empty() {
        return Err(Error::config("fine-tuning needs at least one point"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("learning rate must be finite and non-negative"));
    }
    let mut current = params.clone();
    let mut g = vec![0.0; params.len()];
    for _ in 0..steps {
        let mut ev = GradEvaluator::new(spec, &current)?;
        ev.accumulate_batch(points, &mut g)?;
        current = current.axpy(-lr, &g)?;
    }
    Ok(current)
}
