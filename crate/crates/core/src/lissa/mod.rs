//! Inverse Hessian-vector products: the LiSSA recursion and a dense oracle.
//!
//! Each repetition runs
//!
//! ```text
//! h_0 = v
//! h_j = v + (I - (H_batch_j + λ_d·I) / σ) · h_{j-1}
//! ```
//!
//! whose fixed point is `σ·(H + λ_d·I)⁻¹·v`; the estimate is `σ⁻¹` times the
//! mean of the terminal `h` over `T` independent repetitions. With `σ = 1`
//! and `λ_d = 0` this is the plain Neumann recursion.

mod cache;
mod exact;
mod operator;
mod sweep;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{norm, GradVector, ModelSpec, ParamVector};
use crate::parallel;
use crate::seed::derive_seed;

pub use cache::{STestCache, STEST_MAGIC};
pub use exact::{dense_hessian, ihvp_exact, ExactSolver, MAX_DENSE_PARAMS, MIN_EIGENVALUE};
pub use operator::{DiagonalQuadratic, HessianSource, HvpWorker, ModelHessian};
pub use sweep::{reference_index, sweep, sweep_with, write_sweep_csv, SweepRow};

/// Estimates whose norm grows past this multiple of `‖v‖` count as divergent.
pub const DIVERGENCE_FACTOR: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    /// Maximum recursion depth `J`.
    pub depth: usize,
    /// Points per stochastic Hessian sample `B`, drawn with replacement;
    /// `B ≥ N` uses every point once.
    pub batch_size: usize,
    /// Independent repetitions `T`.
    pub repetitions: usize,
    /// `σ`; must exceed the largest eigenvalue of `H + λ_d·I` for contraction.
    pub scale: f64,
    /// `λ_d`.
    pub damping: f64,
    /// Relative-change threshold for early stopping; 0 disables it in practice.
    pub tol: f64,
    pub check_every: usize,
    pub seed: u64,
}

impl LissaConfig {
    pub const DEFAULT_DEPTH: usize = 1000;
    pub const DEFAULT_BATCH: usize = 1;
    pub const DEFAULT_REPETITIONS: usize = 4;
    pub const DEFAULT_DAMPING: f64 = 0.01;
    pub const DEFAULT_TOL: f64 = 1e-4;
    pub const DEFAULT_CHECK_EVERY: usize = 50;
    /// Multiplier on the power-iteration estimate of the spectral norm.
    pub const SCALE_MARGIN: f64 = 1.5;
    pub const POWER_ITERATIONS: usize = 10;

    /// Default depth, batch size, repetitions, damping and stopping rule with
    /// the given scale.
    pub fn with_scale(scale: f64) -> Self {
        Self {
            depth: Self::DEFAULT_DEPTH,
            batch_size: Self::DEFAULT_BATCH,
            repetitions: Self::DEFAULT_REPETITIONS,
            scale,
            damping: Self::DEFAULT_DAMPING,
            tol: Self::DEFAULT_TOL,
            check_every: Self::DEFAULT_CHECK_EVERY,
            seed: 0,
        }
    }

    /// Defaults with `σ` set from a power-iteration estimate on `train`.
    pub fn defaults_for(spec: &ModelSpec, params: &ParamVector, train: &Dataset) -> Result<Self> {
        let scale = default_scale(spec, params, train, Self::DEFAULT_DAMPING, 0)?;
        Ok(Self::with_scale(scale))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.batch_size == 0 || self.repetitions == 0 || self.check_every == 0 {
            return Err(Error::config("LiSSA depth, batch size, repetitions and check interval must be positive"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("LiSSA scale must be positive and finite"));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::config("LiSSA damping must be non-negative"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("LiSSA tolerance must be non-negative"));
        }
        Ok(())
    }

    /// Per-repetition sampling seed.
    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        self.seed ^ repetition as u64
    }

    /// Work proxy used to order configurations: HVP point evaluations.
    pub fn cost(&self) -> (usize, usize, usize) {
        (self.batch_size, self.depth, self.repetitions)
    }
}

/// SHA-256 digest identifying an estimate: configuration, parameters and
/// query vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConfigHash(pub [u8; 32]);

impl ConfigHash {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest over the dense oracle's damping, parameters and query vector.
    pub fn for_exact(damping: f64, params: &[f64], v: &GradVector) -> Self {
        let mut h = Sha256::new();
        h.update(b"exact");
        h.update(damping.to_le_bytes());
        hash_vectors(&mut h, params, v);
        ConfigHash(h.finalize().into())
    }

    pub fn for_lissa(cfg: &LissaConfig, params: &[f64], v: &GradVector) -> Self {
        let mut h = Sha256::new();
        h.update(b"lissa");
        for n in [cfg.depth, cfg.batch_size, cfg.repetitions, cfg.check_every] {
            h.update((n as u64).to_le_bytes());
        }
        for x in [cfg.scale, cfg.damping, cfg.tol] {
            h.update(x.to_le_bytes());
        }
        h.update(cfg.seed.to_le_bytes());
        hash_vectors(&mut h, params, v);
        ConfigHash(h.finalize().into())
    }
}

fn hash_vectors(h: &mut Sha256, params: &[f64], v: &GradVector) {
    for x in params {
        h.update(x.to_le_bytes());
    }
    h.update(b"|");
    for x in &v.values {
        h.update(x.to_le_bytes());
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Cached inverse-HVP `s_test`.
#[derive(Debug, Clone, PartialEq)]
pub struct STestVector {
    pub values: GradVector,
    pub config_hash: ConfigHash,
    /// Actual recursion depth per repetition; empty for the dense oracle.
    pub iterations_used: Vec<usize>,
    pub converged: Vec<bool>,
}

/// Terminal state of one repetition, before the `σ⁻¹` correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Repetition {
    pub h: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs repetition `t` of the recursion against any Hessian source.
pub fn run_repetition(op: &dyn HessianSource, v: &[f64], cfg: &LissaConfig, t: usize) -> Result<Repetition> {
    let n = op.population();
    let p = v.len();
    let active = op.active();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.repetition_seed(t));
    let mut worker = op.worker()?;
    let v = restrict(v, active);
    let v_norm = norm(&v);
    let inv_scale = 1.0 / cfg.scale;

    let mut h = v.clone();
    let mut snapshot = h.clone();
    let mut hv = vec![0.0; p];
    // A batch as large as the population is the population itself, so the
    // full-batch recursion is deterministic.
    let full_batch = cfg.batch_size >= n;
    let mut batch: Vec<usize> = if full_batch { (0..n).collect() } else { vec![0; cfg.batch_size] };

    for j in 1..=cfg.depth {
        if !full_batch {
            for b in batch.iter_mut() {
                *b = rng.random_range(0..n);
            }
        }
        worker.hvp(&batch, &h, &mut hv)?;
        for i in 0..p {
            h[i] = v[i] + (h[i] - (hv[i] + cfg.damping * h[i]) * inv_scale);
        }
        if let Some(mask) = active {
            for (x, &on) in h.iter_mut().zip(mask) {
                if !on {
                    *x = 0.0;
                }
            }
        }
        let h_norm = norm(&h);
        if !h_norm.is_finite() {
            return Err(Error::numeric(format!(
                "LiSSA estimate became non-finite in repetition {t} at iteration {j}"
            )));
        }
        if h_norm > DIVERGENCE_FACTOR * v_norm {
            return Err(Error::Divergence {
                repetition: t,
                iteration: j,
                norm: h_norm,
            });
        }
        if j % cfg.check_every == 0 {
            let change = h
                .iter()
                .zip(&snapshot)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if change <= cfg.tol * h_norm {
                return Ok(Repetition {
                    h,
                    iterations: j,
                    converged: true,
                });
            }
            snapshot.copy_from_slice(&h);
        }
    }
    Ok(Repetition {
        h,
        iterations: cfg.depth,
        converged: false,
    })
}

/// Zeroes coordinates outside the active set.
fn restrict(v: &[f64], active: Option<&[bool]>) -> Vec<f64> {
    match active {
        None => v.to_vec(),
        Some(mask) => v.iter().zip(mask).map(|(&x, &on)| if on { x } else { 0.0 }).collect(),
    }
}

/// Combines repetition terminals in index order: `σ⁻¹ · mean_t h_t`.
pub fn combine_repetitions(reps: &[Repetition], scale: f64) -> Vec<f64> {
    let p = reps.first().map_or(0, |r| r.h.len());
    let mut acc = vec![0.0; p];
    for r in reps {
        for (a, x) in acc.iter_mut().zip(&r.h) {
            *a += x;
        }
    }
    let t = reps.len() as f64;
    acc.iter().map(|a| a / t / scale).collect()
}

/// LiSSA estimate of `(H + λ_d·I)⁻¹·v` for an arbitrary Hessian source,
/// with repetitions spread over `workers` threads. The single
/// synchronization point is the index-ordered average, so the result does
/// not depend on `workers`.
pub fn estimate_with(
    op: &dyn HessianSource,
    v: &GradVector,
    cfg: &LissaConfig,
    workers: usize,
) -> Result<(GradVector, Vec<Repetition>)> {
    cfg.validate()?;
    if op.population() == 0 {
        return Err(Error::config("LiSSA needs a non-empty training set"));
    }
    if v.len() != op.dim() {
        return Err(Error::config(format!(
            "query vector has {} entries, operator acts on {}",
            v.len(),
            op.dim()
        )));
    }
    v.check_finite("query vector")?;
    let reps = parallel::map_indexed(cfg.repetitions, workers, |t| run_repetition(op, &v.values, cfg, t))?;
    let values = GradVector::new(combine_repetitions(&reps, cfg.scale));
    values.check_finite("LiSSA estimate")?;
    Ok((values, reps))
}

/// Sequential LiSSA estimate of `(H + λ_d·I)⁻¹·v` on the training loss.
pub fn estimate_ihvp(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    v: &GradVector,
    cfg: &LissaConfig,
) -> Result<STestVector> {
    estimate_ihvp_parallel(spec, params, train, v, cfg, 1)
}

/// [`estimate_ihvp`] with repetitions on `workers` threads; bit-identical to
/// the sequential result.
pub fn estimate_ihvp_parallel(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    v: &GradVector,
    cfg: &LissaConfig,
    workers: usize,
) -> Result<STestVector> {
    let op = ModelHessian::new(spec, params, train)?;
    let (values, reps) = estimate_with(&op, v, cfg, workers)?;
    Ok(STestVector {
        values,
        config_hash: ConfigHash::for_lissa(cfg, params.values(), v),
        iterations_used: reps.iter().map(|r| r.iterations).collect(),
        converged: reps.iter().map(|r| r.converged).collect(),
    })
}

/// How the default `σ` is derived from the Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleRule {
    /// Margin times `‖H + λ_d·I‖₂` of the full-population Hessian.
    FullBatch,
    /// Margin times `max_i ‖H_i + λ_d·I‖₂` over single examples; every batch
    /// Hessian of a convex loss is then contractive, whatever `B` is.
    #[default]
    PerExample,
}

impl std::str::FromStr for ScaleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-batch" => Ok(Self::FullBatch),
            "per-example" => Ok(Self::PerExample),
            other => Err(Error::config(format!("unknown scale rule {other:?}"))),
        }
    }
}

/// Power-iteration estimate of `‖mean_{i ∈ batch} H_i + damping·I‖₂`.
fn power_norm(worker: &mut dyn HvpWorker, batch: &[usize], start: &[f64], damping: f64) -> Result<f64> {
    let mut x = start.to_vec();
    let mut hx = vec![0.0; x.len()];
    let mut lambda = 0.0;
    for _ in 0..LissaConfig::POWER_ITERATIONS {
        worker.hvp(batch, &x, &mut hx)?;
        for (h, xi) in hx.iter_mut().zip(&x) {
            *h += damping * xi;
        }
        lambda = norm(&hx);
        if !(lambda > 0.0 && lambda.is_finite()) {
            break;
        }
        for (xi, h) in x.iter_mut().zip(&hx) {
            *xi = h / lambda;
        }
    }
    if !lambda.is_finite() {
        return Err(Error::numeric("power iteration produced a non-finite Hessian norm"));
    }
    Ok(lambda)
}

fn power_start(op: &dyn HessianSource, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "power-iteration"));
    let x: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = restrict(&x, op.active());
    let nx = norm(&x);
    if nx == 0.0 {
        return Err(Error::config("operator has no active coordinates"));
    }
    x.iter_mut().for_each(|a| *a /= nx);
    Ok(x)
}

/// Default `σ` under `rule`: [`LissaConfig::SCALE_MARGIN`] times a
/// power-iteration norm estimate. Per-example norms are spread over
/// `workers` threads.
pub fn scale_with(op: &dyn HessianSource, damping: f64, rule: ScaleRule, seed: u64, workers: usize) -> Result<f64> {
    let start = power_start(op, seed)?;
    let lambda = match rule {
        ScaleRule::FullBatch => {
            let all: Vec<usize> = (0..op.population()).collect();
            power_norm(op.worker()?.as_mut(), &all, &start, damping)?
        }
        ScaleRule::PerExample => {
            let norms = parallel::map_blocks(
                op.population(),
                workers,
                || op.worker(),
                |w, i| power_norm(w.as_mut(), &[i], &start, damping),
            )?;
            norms.into_iter().fold(0.0, f64::max)
        }
    };
    if !(lambda > 0.0) {
        return Err(Error::numeric("power iteration found a zero Hessian norm"));
    }
    Ok(LissaConfig::SCALE_MARGIN * lambda)
}

/// Default `σ` for a model's training loss ([`ScaleRule::PerExample`]).
pub fn default_scale(spec: &ModelSpec, params: &ParamVector, train: &Dataset, damping: f64, seed: u64) -> Result<f64> {
    let op = ModelHessian::new(spec, params, train)?;
    scale_with(&op, damping, ScaleRule::default(), seed, parallel::available_workers())
}
