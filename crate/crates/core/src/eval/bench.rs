//! Wall-time comparison of pipeline variants against a full-scan baseline.
//!
//! Features are computed and indexed once per variant before timing starts,
//! like features cached at training time. Each timed sample is one query
//! on a fresh s_test cache: s_test estimation, candidate lookup and scoring.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::recall::mean_std;
use crate::data::{DataPoint, Dataset};
use crate::engine::{Engine, InfluenceQueryConfig, Solver};
use crate::error::{Error, Result};
use crate::lissa::{LissaConfig, STestCache};
use crate::model::{ModelSpec, ParamVector};
use crate::nnindex::FeatureIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub cfg: InfluenceQueryConfig,
}

/// The slow reference estimate: deep recursion on large batches.
pub fn converged_lissa(scale: f64) -> LissaConfig {
    LissaConfig {
        depth: 1000,
        batch_size: 32,
        repetitions: 4,
        ..LissaConfig::with_scale(scale)
    }
}

/// A cheap estimate: short recursion, small batches, one repetition.
pub fn fast_lissa(scale: f64) -> LissaConfig {
    LissaConfig {
        depth: 100,
        batch_size: 8,
        repetitions: 1,
        ..LissaConfig::with_scale(scale)
    }
}

/// Full scan + converged LiSSA, kNN + converged LiSSA, kNN + fast LiSSA,
/// and the last one on `workers` threads.
pub fn standard_variants(k: usize, scale: f64, workers: usize) -> Vec<Variant> {
    let slow = Solver::Lissa(converged_lissa(scale));
    let fast = Solver::Lissa(fast_lissa(scale));
    vec![
        Variant {
            name: "full-scan+converged".into(),
            cfg: InfluenceQueryConfig::full_scan(slow.clone()),
        },
        Variant {
            name: "knn+converged".into(),
            cfg: InfluenceQueryConfig::knn(k, slow),
        },
        Variant {
            name: "knn+fast".into(),
            cfg: InfluenceQueryConfig::knn(k, fast.clone()),
        },
        Variant {
            name: format!("knn+fast+parallel{workers}"),
            cfg: InfluenceQueryConfig {
                workers,
                ..InfluenceQueryConfig::knn(k, fast)
            },
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub repetition: usize,
    pub test_id: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub variant: String,
    pub mean_s: f64,
    pub std_s: f64,
    /// Baseline mean over this variant's mean.
    pub speedup: f64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn row(&self, name: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.variant == name)
    }

    /// `variant,mean_s,std_s,speedup`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variant,mean_s,std_s,speedup")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.variant, r.mean_s, r.std_s, r.speedup)?;
        }
        Ok(())
    }

    /// `variant,repetition,test_id,seconds`.
    pub fn write_samples_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variant,repetition,test_id,seconds")?;
        for r in &self.rows {
            for s in &r.samples {
                writeln!(w, "{},{},{},{}", r.variant, s.repetition, s.test_id, s.seconds)?;
            }
        }
        Ok(())
    }
}

/// Times every variant on every test point `repetitions` times, one variant
/// at a time. The first variant is the speedup baseline.
pub fn benchmark(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    variants: &[Variant],
    test_points: &[DataPoint],
    repetitions: usize,
) -> Result<TimingReport> {
    if variants.is_empty() || test_points.is_empty() || repetitions == 0 {
        return Err(Error::config("benchmark needs variants, test points and at least one repetition"));
    }
    for v in variants {
        v.cfg.validate()?;
    }
    let mut index: Option<FeatureIndex> = None;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let idx = if v.cfg.use_knn {
            let reuse = index.as_ref().is_some_and(|i| i.backend() == v.cfg.backend);
            if !reuse {
                index = Some(FeatureIndex::from_model(spec, params, train, v.cfg.backend)?);
            }
            index.clone()
        } else {
            None
        };
        let mut samples = Vec::with_capacity(repetitions * test_points.len());
        for repetition in 0..repetitions {
            for z in test_points {
                let cache = Arc::new(STestCache::in_memory());
                let engine = match &idx {
                    Some(i) => Engine::with_index(spec, params, train, v.cfg.clone(), cache, i.clone())?,
                    None => Engine::with_cache(spec, params, train, v.cfg.clone(), cache)?,
                };
                let start = Instant::now();
                let out = engine.query(z)?;
                let seconds = start.elapsed().as_secs_f64();
                std::hint::black_box(out);
                samples.push(Sample {
                    repetition,
                    test_id: z.id,
                    seconds,
                });
            }
        }
        let secs: Vec<f64> = samples.iter().map(|s| s.seconds).collect();
        let (mean_s, std_s) = mean_std(&secs);
        rows.push(TimingRow {
            variant: v.name.clone(),
            mean_s,
            std_s,
            speedup: f64::NAN,
            samples,
        });
    }
    let base = rows[0].mean_s;
    for r in &mut rows {
        r.speedup = base / r.mean_s;
    }
    rows[0].speedup = 1.0;
    Ok(TimingReport { rows })
}
