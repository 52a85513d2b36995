//! Stochastic Hessian sources for the recursion and the dense oracle.

use crate::data::{DataPoint, Dataset};
use crate::error::{Error, Result};
use crate::model::{HvpEvaluator, ModelSpec, ParamVector};

/// A loss whose Hessian is the mean of per-example Hessians over a finite
/// population, queried through batched Hessian-vector products.
pub trait HessianSource: Sync {
    /// Length of the vectors the operator acts on.
    fn dim(&self) -> usize;
    /// Number of examples batches are drawn from.
    fn population(&self) -> usize;
    /// Coordinates the operator acts on; the rest are held at zero.
    fn active(&self) -> Option<&[bool]> {
        None
    }
    /// Per-thread evaluator with its own scratch space.
    fn worker(&self) -> Result<Box<dyn HvpWorker + '_>>;
}

pub trait HvpWorker {
    /// `out = mean_{i ∈ batch} H_i · v`, including any regularizer.
    fn hvp(&mut self, batch: &[usize], v: &[f64], out: &mut [f64]) -> Result<()>;

    /// Full-population product.
    fn full_hvp(&mut self, n: usize, v: &[f64], out: &mut [f64]) -> Result<()> {
        let all: Vec<usize> = (0..n).collect();
        self.hvp(&all, v, out)
    }
}

/// The training loss of a model at fixed parameters.
pub struct ModelHessian<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    points: &'a [DataPoint],
    mask: Option<Vec<bool>>,
}

impl<'a> ModelHessian<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector, train: &'a Dataset) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::config(format!(
                "model expects {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if train.is_empty() {
            return Err(Error::config("training set must not be empty"));
        }
        let active = spec.active_coordinates();
        let mask = (active.len() < params.len()).then(|| {
            let mut m = vec![false; params.len()];
            for i in active {
                m[i] = true;
            }
            m
        });
        Ok(Self {
            spec,
            params,
            points: train.points(),
            mask,
        })
    }
}

struct ModelWorker<'a> {
    eval: HvpEvaluator<'a>,
    points: &'a [DataPoint],
}

impl HvpWorker for ModelWorker<'_> {
    fn hvp(&mut self, batch: &[usize], v: &[f64], out: &mut [f64]) -> Result<()> {
        let points = self.points;
        self.eval.hvp_into(batch.iter().map(|&i| &points[i]), v, out)
    }

    fn full_hvp(&mut self, _n: usize, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.eval.hvp_into(self.points, v, out)
    }
}

impl HessianSource for ModelHessian<'_> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn population(&self) -> usize {
        self.points.len()
    }

    fn active(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    fn worker(&self) -> Result<Box<dyn HvpWorker + '_>> {
        Ok(Box::new(ModelWorker {
            eval: HvpEvaluator::new(self.spec, self.params)?,
            points: self.points,
        }))
    }
}

/// Quadratic losses `½·θᵀ·diag(h_i)·θ`, one diagonal per example. Useful as
/// a fixture with a Hessian known in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalQuadratic {
    diagonals: Vec<Vec<f64>>,
}

impl DiagonalQuadratic {
    pub fn new(diagonals: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = diagonals.first() else {
            return Err(Error::config("need at least one example"));
        };
        let p = first.len();
        if p == 0 || diagonals.iter().any(|d| d.len() != p || d.iter().any(|x| !x.is_finite())) {
            return Err(Error::config("diagonals must be non-empty, equal length and finite"));
        }
        Ok(Self { diagonals })
    }

    /// `n` examples that all share the Hessian `diag(h)`.
    pub fn uniform(h: Vec<f64>, n: usize) -> Result<Self> {
        Self::new(vec![h; n.max(1)])
    }

    /// Mean per-example diagonal.
    pub fn mean_diagonal(&self) -> Vec<f64> {
        let n = self.diagonals.len() as f64;
        let mut acc = vec![0.0; self.diagonals[0].len()];
        for d in &self.diagonals {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        acc.iter().map(|a| a / n).collect()
    }
}

struct DiagonalWorker<'a>(&'a DiagonalQuadratic);

impl HvpWorker for DiagonalWorker<'_> {
    fn hvp(&mut self, batch: &[usize], v: &[f64], out: &mut [f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::config("batch must not be empty"));
        }
        out.fill(0.0);
        for &i in batch {
            for ((o, h), x) in out.iter_mut().zip(&self.0.diagonals[i]).zip(v) {
                *o += h * x;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(())
    }
}

impl HessianSource for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.diagonals[0].len()
    }

    fn population(&self) -> usize {
        self.diagonals.len()
    }

    fn worker(&self) -> Result<Box<dyn HvpWorker + '_>> {
        Ok(Box::new(DiagonalWorker(self)))
    }
}
