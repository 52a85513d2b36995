//! Dense inverse-HVP oracle: assemble `H + λ_d·I` column by column and
//! factor it once.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::operator::{HessianSource, ModelHessian};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{GradVector, ModelSpec, ParamVector};

/// Largest matrix the dense oracle will assemble.
pub const MAX_DENSE_PARAMS: usize = 2000;

/// Smallest eigenvalue accepted as nonsingular.
pub const MIN_EIGENVALUE: f64 = 1e-10;

/// Dense `H + damping·I` restricted to the active coordinates, together with
/// their indices into the full parameter vector.
pub fn dense_hessian(op: &dyn HessianSource, damping: f64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let p = op.dim();
    let active: Vec<usize> = match op.active() {
        None => (0..p).collect(),
        Some(mask) => (0..p).filter(|&i| mask[i]).collect(),
    };
    let k = active.len();
    if k > MAX_DENSE_PARAMS {
        return Err(Error::Capability(format!(
            "dense Hessian needs {k} x {k} entries; the oracle is limited to {MAX_DENSE_PARAMS} parameters"
        )));
    }
    let mut worker = op.worker()?;
    let mut e = vec![0.0; p];
    let mut col = vec![0.0; p];
    let mut h = DMatrix::zeros(k, k);
    for (c, &j) in active.iter().enumerate() {
        e[j] = 1.0;
        worker.full_hvp(op.population(), &e, &mut col)?;
        e[j] = 0.0;
        for (r, &i) in active.iter().enumerate() {
            h[(r, c)] = col[i];
        }
        h[(c, c)] += damping;
    }
    // Forward-over-reverse columns agree with their transposes only up to
    // round-off; symmetrize before factoring.
    let h = (&h + h.transpose()) * 0.5;
    Ok((h, active))
}

/// Factored `H + λ_d·I`, reusable across query vectors.
#[derive(Debug, Clone)]
pub struct ExactSolver {
    chol: Cholesky<f64, nalgebra::Dyn>,
    active: Vec<usize>,
    dim: usize,
    damping: f64,
    min_eigenvalue: f64,
    params: Vec<f64>,
}

impl ExactSolver {
    pub fn new(spec: &ModelSpec, params: &ParamVector, train: &Dataset, damping: f64) -> Result<Self> {
        let op = ModelHessian::new(spec, params, train)?;
        let mut solver = Self::from_source(&op, damping)?;
        solver.params = params.values().to_vec();
        Ok(solver)
    }

    pub fn from_source(op: &dyn HessianSource, damping: f64) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::config("damping must be non-negative"));
        }
        let (h, active) = dense_hessian(op, damping)?;
        let eig = SymmetricEigen::new(h.clone());
        let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_eigenvalue >= MIN_EIGENVALUE) {
            return Err(Error::Singular { min_eigenvalue });
        }
        let chol = Cholesky::new(h).ok_or(Error::Singular { min_eigenvalue })?;
        Ok(Self {
            chol,
            active,
            dim: op.dim(),
            damping,
            min_eigenvalue,
            params: Vec::new(),
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// Parameter values the Hessian was assembled at (empty for non-model sources).
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// `(H + λ_d·I)⁻¹·v`; frozen coordinates come back as zero.
    pub fn solve(&self, v: &GradVector) -> Result<GradVector> {
        if v.len() != self.dim {
            return Err(Error::config(format!(
                "query vector has {} entries, solver expects {}",
                v.len(),
                self.dim
            )));
        }
        v.check_finite("query vector")?;
        let rhs = DVector::from_iterator(self.active.len(), self.active.iter().map(|&i| v.values[i]));
        let s = self.chol.solve(&rhs);
        let mut out = vec![0.0; self.dim];
        for (&i, x) in self.active.iter().zip(s.iter()) {
            out[i] = *x;
        }
        let out = GradVector::new(out);
        out.check_finite("exact inverse-HVP")?;
        Ok(out)
    }
}

/// One-shot dense solve of `(H + λ_d·I)·s = v` on the full training loss.
pub fn ihvp_exact(spec: &ModelSpec, params: &ParamVector, train: &Dataset, v: &GradVector, damping: f64) -> Result<GradVector> {
    ExactSolver::new(spec, params, train, damping)?.solve(v)
}
