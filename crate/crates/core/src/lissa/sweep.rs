//! Speed-quality sweeps over `(J, B, T)` grids.

use std::io::Write;
use std::time::Instant;

use super::operator::{HessianSource, ModelHessian};
use super::{estimate_with, LissaConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{norm, GradVector, ModelSpec, ParamVector};

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub config_id: usize,
    pub config: LissaConfig,
    pub seconds: f64,
    /// `‖estimate − reference‖`; `None` when this row or the reference failed.
    pub error_norm: Option<f64>,
    /// `error_norm / ‖reference‖`.
    pub relative_error: Option<f64>,
    pub iterations_used: Vec<usize>,
    pub is_reference: bool,
    pub error: Option<String>,
}

/// Index of the most expensive configuration: largest `B`, then `J`, then
/// `T`; the first one wins among equals.
pub fn reference_index(grid: &[LissaConfig]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in grid.iter().enumerate() {
        if best.is_none_or(|b| c.cost() > grid[b].cost()) {
            best = Some(i);
        }
    }
    best
}

/// Runs every configuration on a model's training loss.
pub fn sweep(spec: &ModelSpec, params: &ParamVector, train: &Dataset, v: &GradVector, grid: &[LissaConfig]) -> Result<Vec<SweepRow>> {
    let op = ModelHessian::new(spec, params, train)?;
    sweep_with(&op, v, grid)
}

/// Runs every configuration and measures its distance to the reference.
/// Failures are recorded per row and do not stop the sweep.
pub fn sweep_with(op: &dyn HessianSource, v: &GradVector, grid: &[LissaConfig]) -> Result<Vec<SweepRow>> {
    let Some(ref_idx) = reference_index(grid) else {
        return Err(Error::config("sweep grid must not be empty"));
    };
    let mut runs = Vec::with_capacity(grid.len());
    for cfg in grid {
        let start = Instant::now();
        let out = estimate_with(op, v, cfg, 1);
        runs.push((out, start.elapsed().as_secs_f64()));
    }
    let reference = runs[ref_idx].0.as_ref().ok().map(|(r, _)| r.clone());
    let ref_norm = reference.as_ref().map(GradVector::norm);

    Ok(runs
        .into_iter()
        .enumerate()
        .map(|(i, (out, seconds))| {
            let mut row = SweepRow {
                config_id: i,
                config: grid[i],
                seconds,
                error_norm: None,
                relative_error: None,
                iterations_used: Vec::new(),
                is_reference: i == ref_idx,
                error: None,
            };
            match out {
                Ok((est, reps)) => {
                    row.iterations_used = reps.iter().map(|r| r.iterations).collect();
                    match &reference {
                        Some(r) => {
                            let diff: Vec<f64> = est.values.iter().zip(&r.values).map(|(a, b)| a - b).collect();
                            let e = norm(&diff);
                            row.error_norm = Some(e);
                            row.relative_error = ref_norm.map(|n| if n > 0.0 { e / n } else { e });
                        }
                        None => row.error = Some("reference configuration failed".into()),
                    }
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect())
}

/// `config_id,J,B,T,sigma,damping,seconds,error_norm`; failed rows carry `NaN`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "config_id,J,B,T,sigma,damping,seconds,error_norm")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{}",
            r.config_id,
            r.config.depth,
            r.config.batch_size,
            r.config.repetitions,
            r.config.scale,
            r.config.damping,
            r.seconds,
            r.error_norm.unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}
