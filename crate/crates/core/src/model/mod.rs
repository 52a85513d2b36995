//! Differentiable model substrate: logistic regression and small MLPs with
//! exact gradients and exact Hessian-vector products.
//!
//! The per-example loss is cross-entropy plus `(λ_wd/2)·‖θ‖²`, so the weight
//! decay term is visible to both [`ModelSpec::grad`] and [`ModelSpec::hvp`].

mod net;
mod params;
mod scalar;
mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataPoint;
use crate::error::{Error, Result};

pub use params::{dot, norm, GradVector, Layout, ParamVector, Segment, PARAMS_MAGIC};
pub use scalar::{Dual, Scalar};
pub use train::{finetune, fit_from, train, Optimizer, TrainConfig, TrainOutcome};

use net::{Shape, Workspace};

pub const DEFAULT_WEIGHT_DECAY: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Logistic,
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

/// Model family, shapes and loss regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub classes: usize,
    pub dim: usize,
    pub weight_decay: f64,
    /// Segments whose gradient (and HVP rows/columns) are masked to zero.
    #[serde(default)]
    pub frozen: Vec<String>,
    /// Whether `hvp` includes the `λ_wd·I` term of the regularizer.
    #[serde(default = "default_true")]
    pub decay_in_hessian: bool,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn logistic(dim: usize, classes: usize, weight_decay: f64) -> Self {
        Self {
            architecture: Architecture::Logistic,
            classes,
            dim,
            weight_decay,
            frozen: Vec::new(),
            decay_in_hessian: true,
        }
    }

    pub fn mlp(dim: usize, classes: usize, hidden: Vec<usize>, activation: Activation, weight_decay: f64) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden, activation },
            classes,
            dim,
            weight_decay,
            frozen: Vec::new(),
            decay_in_hessian: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be a finite non-negative number"));
        }
        if let Architecture::Mlp { hidden, .. } = &self.architecture {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::config("mlp hidden sizes must be positive"));
            }
        }
        let layout = self.layout();
        for name in &self.frozen {
            if layout.segment(name).is_none() {
                return Err(Error::config(format!("frozen segment `{name}` does not exist")));
            }
        }
        Ok(())
    }

    /// Output units: one sigmoid logit for binary tasks, otherwise one per class.
    pub fn outputs(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    fn shape(&self) -> Shape {
        let mut sizes = vec![self.dim];
        let activation = match &self.architecture {
            Architecture::Logistic => Activation::Tanh,
            Architecture::Mlp { hidden, activation } => {
                sizes.extend_from_slice(hidden);
                *activation
            }
        };
        sizes.push(self.outputs());
        Shape::new(sizes, activation)
    }

    pub fn layout(&self) -> Layout {
        let shape = self.shape();
        Layout::from_sizes((0..shape.layers()).flat_map(|l| {
            let (i, o) = (shape.sizes[l], shape.sizes[l + 1]);
            [(format!("layer{l}.weight"), i * o), (format!("layer{l}.bias"), o)]
        }))
    }

    pub fn param_count(&self) -> usize {
        self.shape().total
    }

    /// Width of [`features`](Self::features).
    pub fn feature_dim(&self) -> usize {
        match &self.architecture {
            Architecture::Logistic => self.dim,
            Architecture::Mlp { hidden, .. } => *hidden.last().expect("validated"),
        }
    }

    /// Seeded initialization: zeros for logistic regression, Glorot-uniform
    /// weights and zero biases for MLPs.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        self.validate()?;
        let shape = self.shape();
        let mut values = vec![0.0; shape.total];
        if matches!(self.architecture, Architecture::Mlp { .. }) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in 0..shape.layers() {
                let (i, o) = (shape.sizes[l], shape.sizes[l + 1]);
                let a = (6.0 / (i + o) as f64).sqrt();
                let off = shape.weight_offsets[l];
                for v in &mut values[off..off + i * o] {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        ParamVector::new(values, Arc::new(self.layout()))
    }

    /// Per-coordinate mask, `false` on frozen segments. `None` when nothing is frozen.
    fn active_mask(&self) -> Option<Vec<bool>> {
        if self.frozen.is_empty() {
            return None;
        }
        let layout = self.layout();
        let mut mask = vec![true; layout.len()];
        for seg in layout.segments() {
            if self.frozen.contains(&seg.name) {
                mask[seg.offset..seg.offset + seg.len].fill(false);
            }
        }
        Some(mask)
    }

    /// Ids of the coordinates that are not frozen.
    pub fn active_coordinates(&self) -> Vec<usize> {
        match self.active_mask() {
            None => (0..self.param_count()).collect(),
            Some(mask) => mask.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i).collect(),
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::config(format!(
                "model expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    fn check_point(&self, z: &DataPoint) -> Result<()> {
        if z.x.len() != self.dim {
            return Err(Error::config(format!(
                "point {} has dimension {}, model expects {}",
                z.id,
                z.x.len(),
                self.dim
            )));
        }
        if z.y >= self.classes {
            return Err(Error::config(format!("point {} label {} >= C", z.id, z.y)));
        }
        Ok(())
    }

    fn decay_term(&self, params: &[f64]) -> f64 {
        0.5 * self.weight_decay * dot(params, params)
    }

    /// Cross-entropy at `z` plus `(λ_wd/2)·‖θ‖²`.
    pub fn loss(&self, params: &ParamVector, z: &DataPoint) -> Result<f64> {
        self.check_params(params)?;
        self.check_point(z)?;
        let shape = self.shape();
        let mut ws = Workspace::<f64>::new(&shape);
        let l = net::point_loss_grad(&shape, params.values(), &z.x, z.y, 1.0, None, &mut ws)
            + self.decay_term(params.values());
        if !l.is_finite() {
            return Err(Error::numeric(format!("loss at point {} is not finite", z.id)));
        }
        Ok(l)
    }

    /// Mean loss over a batch.
    pub fn mean_loss<'a, I>(&self, params: &ParamVector, batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        self.check_params(params)?;
        let shape = self.shape();
        let mut ws = Workspace::<f64>::new(&shape);
        let mut total = 0.0;
        let mut n = 0usize;
        for z in batch {
            self.check_point(z)?;
            total += net::point_loss_grad(&shape, params.values(), &z.x, z.y, 1.0, None, &mut ws);
            n += 1;
        }
        if n == 0 {
            return Err(Error::config("batch must not be empty"));
        }
        let l = total / n as f64 + self.decay_term(params.values());
        if !l.is_finite() {
            return Err(Error::numeric("mean loss is not finite"));
        }
        Ok(l)
    }

    /// Mean gradient of the loss over a non-empty batch.
    pub fn grad<'a, I>(&self, params: &ParamVector, batch: I) -> Result<GradVector>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        let mut ev = GradEvaluator::new(self, params)?;
        let mut out = vec![0.0; self.param_count()];
        ev.accumulate_batch(batch, &mut out)?;
        Ok(GradVector::new(out))
    }

    /// Exact `∇²θ L(batch)·v` by forward-mode differentiation of the reverse pass.
    pub fn hvp<'a, I>(&self, params: &ParamVector, batch: I, v: &GradVector) -> Result<GradVector>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        let mut ev = HvpEvaluator::new(self, params)?;
        let mut out = vec![0.0; self.param_count()];
        ev.hvp_into(batch, &v.values, &mut out)?;
        Ok(GradVector::new(out))
    }

    /// The model's final representation: `x` for logistic regression, the last
    /// hidden activations for an MLP.
    pub fn features(&self, params: &ParamVector, z: &DataPoint) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_point(z)?;
        if let Architecture::Logistic = self.architecture {
            return Ok(z.x.clone());
        }
        let shape = self.shape();
        let mut ws = Workspace::<f64>::new(&shape);
        net::forward(&shape, params.values(), &z.x, &mut ws);
        Ok(ws.representation().to_vec())
    }

    /// Class probabilities at `x`.
    pub fn predict_proba(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if x.len() != self.dim {
            return Err(Error::config("input dimension mismatch"));
        }
        let shape = self.shape();
        let mut ws = Workspace::<f64>::new(&shape);
        net::forward(&shape, params.values(), x, &mut ws);
        let logits = ws.logits();
        if logits.len() == 1 {
            let p = 1.0 / (1.0 + (-logits[0]).exp());
            Ok(vec![1.0 - p, p])
        } else {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            Ok(e.into_iter().map(|v| v / s).collect())
        }
    }

    /// Argmax class; ties resolve to the lowest class index.
    pub fn predict(&self, params: &ParamVector, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(params, x)?;
        let mut best = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean loss and accuracy over a dataset.
    pub fn evaluate(&self, params: &ParamVector, points: &[DataPoint]) -> Result<(f64, f64)> {
        let loss = self.mean_loss(params, points)?;
        let mut correct = 0usize;
        for z in points {
            if self.predict(params, &z.x)? == z.y {
                correct += 1;
            }
        }
        Ok((loss, correct as f64 / points.len() as f64))
    }
}

/// Reusable per-point gradient evaluator holding its scratch buffers; one
/// per thread.
pub struct GradEvaluator<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    shape: Shape,
    ws: Workspace<f64>,
    mask: Option<Vec<bool>>,
}

impl<'a> GradEvaluator<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector) -> Result<Self> {
        spec.check_params(params)?;
        let shape = spec.shape();
        let ws = Workspace::new(&shape);
        Ok(Self {
            spec,
            params,
            shape,
            ws,
            mask: spec.active_mask(),
        })
    }

    /// Writes the mean gradient over `batch` into `out` (overwritten).
    pub fn accumulate_batch<'b, I>(&mut self, batch: I, out: &mut [f64]) -> Result<()>
    where
        I: IntoIterator<Item = &'b DataPoint>,
    {
        out.fill(0.0);
        let theta = self.params.values();
        let mut n = 0usize;
        for z in batch {
            self.spec.check_point(z)?;
            net::point_loss_grad(&self.shape, theta, &z.x, z.y, 1.0, Some(out), &mut self.ws);
            n += 1;
        }
        if n == 0 {
            return Err(Error::config("batch must not be empty"));
        }
        let inv = 1.0 / n as f64;
        let wd = self.spec.weight_decay;
        for (g, &t) in out.iter_mut().zip(theta) {
            *g = *g * inv + wd * t;
        }
        self.finish(out)
    }

    /// Gradient of a single point's loss into `out`.
    pub fn point_grad(&mut self, z: &DataPoint, out: &mut [f64]) -> Result<()> {
        self.accumulate_batch(std::iter::once(z), out)
    }

    fn finish(&self, out: &mut [f64]) -> Result<()> {
        if let Some(mask) = &self.mask {
            for (g, &a) in out.iter_mut().zip(mask) {
                if !a {
                    *g = 0.0;
                }
            }
        }
        if out.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("gradient is not finite"));
        }
        Ok(())
    }
}

/// Reusable Hessian-vector product evaluator (forward-over-reverse).
pub struct HvpEvaluator<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    shape: Shape,
    ws: Workspace<Dual>,
    theta: Vec<Dual>,
    grad: Vec<Dual>,
    mask: Option<Vec<bool>>,
}

impl<'a> HvpEvaluator<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector) -> Result<Self> {
        spec.check_params(params)?;
        let shape = spec.shape();
        let ws = Workspace::new(&shape);
        let p = params.len();
        Ok(Self {
            spec,
            params,
            shape,
            ws,
            theta: vec![Dual::default(); p],
            grad: vec![Dual::default(); p],
            mask: spec.active_mask(),
        })
    }

    /// `out = H(batch)·v`, with frozen coordinates masked on both sides.
    pub fn hvp_into<'b, I>(&mut self, batch: I, v: &[f64], out: &mut [f64]) -> Result<()>
    where
        I: IntoIterator<Item = &'b DataPoint>,
    {
        if v.len() != self.theta.len() || out.len() != self.theta.len() {
            return Err(Error::config("vector length does not match parameter count"));
        }
        for (i, ((t, &p), &vi)) in self.theta.iter_mut().zip(self.params.values()).zip(v).enumerate() {
            let active = self.mask.as_ref().is_none_or(|m| m[i]);
            *t = Dual::new(p, if active { vi } else { 0.0 });
        }
        self.grad.fill(Dual::default());
        let mut n = 0usize;
        for z in batch {
            self.spec.check_point(z)?;
            net::point_loss_grad(&self.shape, &self.theta, &z.x, z.y, 1.0, Some(&mut self.grad), &mut self.ws);
            n += 1;
        }
        if n == 0 {
            return Err(Error::config("batch must not be empty"));
        }
        let inv = 1.0 / n as f64;
        let wd = if self.spec.decay_in_hessian {
            self.spec.weight_decay
        } else {
            0.0
        };
        for (i, (o, g)) in out.iter_mut().zip(&self.grad).enumerate() {
            let active = self.mask.as_ref().is_none_or(|m| m[i]);
            *o = if active { g.eps * inv + wd * self.theta[i].eps } else { 0.0 };
        }
        if out.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("Hessian-vector product is not finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
