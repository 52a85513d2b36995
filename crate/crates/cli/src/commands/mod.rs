//! Subcommand implementations and the helpers they share.
//!
//! Every command follows the same shape: read all settings, call
//! [`Settings::finish`] so unknown keys and bad values fail fast, load and
//! check inputs, then compute and write artifacts.

mod apply;
mod data;
mod eval;
mod query;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use fastinf::engine::{Engine, InfluenceQueryConfig, Mode, Solver};
use fastinf::lissa::{scale_with, LissaConfig, ModelHessian, STestCache, ScaleRule, MAX_DENSE_PARAMS};
use fastinf::nnindex::{Backend, FeatureCache, FeatureIndex};
use fastinf::parallel::available_workers;
use fastinf::seed::derive_seed;
use fastinf::{DataPoint, Dataset, ModelSpec, ParamVector, Role};

use crate::manifest::{Outputs, RunManifest};
use crate::settings::Settings;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    GenData,
    Train,
    Influence,
    RecallEval,
    LissaSweep,
    RetrainEval,
    Benchmark,
    Correct,
    Simulate,
    ExportGraph,
}

impl CommandKind {
    const ALL: [CommandKind; 10] = [
        CommandKind::GenData,
        CommandKind::Train,
        CommandKind::Influence,
        CommandKind::RecallEval,
        CommandKind::LissaSweep,
        CommandKind::RetrainEval,
        CommandKind::Benchmark,
        CommandKind::Correct,
        CommandKind::Simulate,
        CommandKind::ExportGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::GenData => "gen-data",
            CommandKind::Train => "train",
            CommandKind::Influence => "influence",
            CommandKind::RecallEval => "recall-eval",
            CommandKind::LissaSweep => "lissa-sweep",
            CommandKind::RetrainEval => "retrain-eval",
            CommandKind::Benchmark => "benchmark",
            CommandKind::Correct => "correct",
            CommandKind::Simulate => "simulate",
            CommandKind::ExportGraph => "export-graph",
        }
    }
}

impl FromStr for CommandKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CliError::usage(format!("unknown command `{s}` in manifest")))
    }
}

/// State of one run: settings, the root seed and the derived seeds handed
/// out so far.
pub struct Run {
    pub settings: Settings,
    pub workers: usize,
    root: u64,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    fn new(mut settings: Settings) -> Result<Self, CliError> {
        let root: u64 = settings.get("seed", 0)?;
        let workers: usize = settings.get("workers", available_workers())?;
        if workers == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        let mut seeds = BTreeMap::new();
        seeds.insert("root".to_string(), root);
        Ok(Self {
            settings,
            workers,
            root,
            seeds,
        })
    }

    /// Child seed for `label`, recorded in the manifest.
    pub fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.root, label);
        self.seeds.insert(label.to_string(), s);
        s
    }
}

pub fn execute(kind: CommandKind, settings: Settings, out: &Path) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut run = Run::new(settings)?;
    let mut outputs = Outputs::new(out)?;
    match kind {
        CommandKind::GenData => data::gen_data(&mut run, &mut outputs)?,
        CommandKind::Train => data::train(&mut run, &mut outputs)?,
        CommandKind::Influence => query::influence(&mut run, &mut outputs)?,
        CommandKind::ExportGraph => query::export_graph(&mut run, &mut outputs)?,
        CommandKind::RecallEval => eval::recall_eval(&mut run, &mut outputs)?,
        CommandKind::LissaSweep => eval::lissa_sweep(&mut run, &mut outputs)?,
        CommandKind::RetrainEval => eval::retrain_eval(&mut run, &mut outputs)?,
        CommandKind::Benchmark => eval::benchmark(&mut run, &mut outputs)?,
        CommandKind::Correct => apply::correct(&mut run, &mut outputs)?,
        CommandKind::Simulate => apply::simulate(&mut run, &mut outputs)?,
    }
    let Run { settings, seeds, .. } = run;
    outputs.finish(kind.name(), settings.resolved().clone(), seeds, start.elapsed().as_secs_f64())
}

/// A keyword setting parsed through its library `FromStr`.
pub fn parsed<T>(value: &str, key: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::usage(format!("`{key}`: {e}")))
}

/// Loads a dataset and records its digest; parse errors keep their line.
pub fn load_dataset(outputs: &mut Outputs, key: &str, path: &Path, role: Role) -> Result<Dataset, CliError> {
    outputs.record_input(key, path)?;
    Dataset::load(path, role).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_model(outputs: &mut Outputs, model: &Path, params: Option<&Path>) -> Result<(ModelSpec, Option<ParamVector>), CliError> {
    outputs.record_input("model", model)?;
    let text = std::fs::read_to_string(model).map_err(|e| CliError::io(model, e))?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: malformed model: {e}", model.display())))?;
    spec.validate().map_err(|e| CliError::usage(format!("{}: {e}", model.display())))?;
    let Some(path) = params else {
        return Ok((spec, None));
    };
    outputs.record_input("params", path)?;
    let p = ParamVector::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if p.len() != spec.param_count() {
        return Err(CliError::usage(format!(
            "{} holds {} parameters, the model needs {}",
            path.display(),
            p.len(),
            spec.param_count()
        )));
    }
    Ok((spec, Some(p)))
}

pub fn check_dims(spec: &ModelSpec, sets: &[(&str, &Dataset)]) -> Result<(), CliError> {
    for (name, d) in sets {
        if d.dim() != spec.dim || d.classes() != spec.classes {
            return Err(CliError::usage(format!(
                "{name} set has d={} C={}, the model expects d={} C={}",
                d.dim(),
                d.classes(),
                spec.dim,
                spec.classes
            )));
        }
    }
    Ok(())
}

/// Points of `set` with the given ids, in the given order.
pub fn points_by_id(set: &Dataset, ids: &[usize], key: &str) -> Result<Vec<DataPoint>, CliError> {
    ids.iter()
        .map(|&id| {
            set.get(id)
                .cloned()
                .ok_or_else(|| CliError::usage(format!("`{key}`: id {id} is not in a set of {} points", set.len())))
        })
        .collect()
}

/// Paths of the `train`/`test`/`model`/`params` inputs.
pub struct ModelInputs {
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub model: PathBuf,
    pub params: Option<PathBuf>,
}

impl ModelInputs {
    pub fn resolve(s: &mut Settings, need_test: bool, need_params: bool) -> Result<Self, CliError> {
        let train = s.input("train")?;
        let test = if need_test { Some(s.input("test")?) } else { None };
        let model = s.input("model")?;
        let params = if need_params { Some(s.input("params")?) } else { None };
        Ok(Self { train, test, model, params })
    }
}

/// A trained model with its training and (optional) test sets.
pub struct Loaded {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Loaded {
    pub fn load(inputs: &ModelInputs, outputs: &mut Outputs) -> Result<Self, CliError> {
        let train = load_dataset(outputs, "train", &inputs.train, Role::Train)?;
        let test = match &inputs.test {
            Some(p) => Some(load_dataset(outputs, "test", p, Role::Test)?),
            None => None,
        };
        let (spec, params) = load_model(outputs, &inputs.model, inputs.params.as_deref())?;
        let params = params.ok_or_else(|| CliError::usage("missing required setting `--params`"))?;
        check_dims(&spec, &[("train", &train)])?;
        if let Some(t) = &test {
            check_dims(&spec, &[("test", t)])?;
        }
        Ok(Self { spec, params, train, test })
    }

    pub fn test(&self) -> &Dataset {
        self.test.as_ref().expect("test set requested at resolution")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Lissa,
    Exact,
    /// Exact when the active parameter count allows a dense factorization.
    Auto,
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lissa" => Ok(SolverKind::Lissa),
            "exact" => Ok(SolverKind::Exact),
            "auto" => Ok(SolverKind::Auto),
            _ => Err("expected lissa, exact or auto".into()),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Lissa => "lissa",
            SolverKind::Exact => "exact",
            SolverKind::Auto => "auto",
        })
    }
}

/// Resolved s_test settings; the LiSSA scale may still need estimating.
pub struct SolverSettings {
    kind: SolverKind,
    lissa: LissaConfig,
    scale: Option<f64>,
    rule: ScaleRule,
}

impl SolverSettings {
    pub fn resolve(run: &mut Run, default_kind: SolverKind) -> Result<Self, CliError> {
        let seed = run.seed("lissa");
        let s = &mut run.settings;
        let kind: SolverKind = s.get("solver", default_kind)?;
        let damping: f64 = s.get("damping", LissaConfig::DEFAULT_DAMPING)?;
        let depth: usize = s.get("depth", LissaConfig::DEFAULT_DEPTH)?;
        let batch: usize = s.get("batch", LissaConfig::DEFAULT_BATCH)?;
        let repetitions: usize = s.get("repetitions", LissaConfig::DEFAULT_REPETITIONS)?;
        let tol: f64 = s.get("lissa_tol", LissaConfig::DEFAULT_TOL)?;
        let scale: Option<f64> = s.opt("scale")?;
        let rule: String = s.get("scale_rule", "per-example".to_string())?;
        let rule: ScaleRule = parsed(&rule, "scale_rule")?;
        let lissa = LissaConfig {
            depth,
            batch_size: batch,
            repetitions,
            damping,
            tol,
            seed,
            ..LissaConfig::with_scale(scale.unwrap_or(1.0))
        };
        lissa.validate()?;
        Ok(Self { kind, lissa, scale, rule })
    }

    /// The concrete solver; may run power iteration for σ.
    pub fn build(&self, spec: &ModelSpec, params: &ParamVector, train: &Dataset, workers: usize) -> Result<Solver, CliError> {
        let exact = match self.kind {
            SolverKind::Exact => true,
            SolverKind::Lissa => false,
            SolverKind::Auto => spec.active_coordinates().len() <= MAX_DENSE_PARAMS,
        };
        if exact {
            return Ok(Solver::Exact {
                damping: self.lissa.damping,
            });
        }
        let scale = match self.scale {
            Some(s) => s,
            None => {
                let op = ModelHessian::new(spec, params, train)?;
                scale_with(&op, self.lissa.damping, self.rule, self.lissa.seed, workers)?
            }
        };
        Ok(Solver::Lissa(LissaConfig { scale, ..self.lissa }))
    }

    /// Placeholder solver for validating query settings before σ is known.
    pub fn provisional(&self) -> Solver {
        Solver::Lissa(self.lissa)
    }
}

/// Resolved kNN settings.
pub struct KnnSettings {
    pub k: Option<usize>,
    pub backend: Backend,
}

impl KnnSettings {
    pub fn resolve(run: &mut Run) -> Result<Self, CliError> {
        let k: usize = run.settings.get("knn_k", 0)?;
        let backend: String = run.settings.get("backend", "exact".to_string())?;
        let backend = match backend.as_str() {
            "exact" => Backend::Exact,
            "graph" => {
                let m = run.settings.get("hnsw_m", Backend::DEFAULT_M)?;
                let ef = run.settings.get("hnsw_ef", Backend::DEFAULT_EF)?;
                Backend::Graph { m, ef, seed: run.seed("hnsw") }
            }
            other => return Err(CliError::usage(format!("`backend`: expected exact or graph, found `{other}`"))),
        };
        Ok(Self {
            k: (k > 0).then_some(k),
            backend,
        })
    }

    pub fn query_config(&self, solver: Solver, mode: Mode, m: usize, workers: usize) -> InfluenceQueryConfig {
        let base = match self.k {
            Some(k) => InfluenceQueryConfig::knn(k, solver),
            None => InfluenceQueryConfig::full_scan(solver),
        };
        InfluenceQueryConfig {
            mode,
            m,
            workers,
            backend: self.backend,
            ..base
        }
    }
}

/// An engine backed by the `FASTINF_CACHE_DIR` s_test and feature caches.
pub fn cached_engine<'a>(
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    train: &'a Dataset,
    cfg: InfluenceQueryConfig,
) -> Result<Engine<'a>, CliError> {
    let cache = Arc::new(STestCache::from_env()?);
    if !cfg.use_knn {
        return Ok(Engine::with_cache(spec, params, train, cfg, cache)?);
    }
    let features = FeatureCache::from_env()?.load_or_compute(spec, params, train)?;
    let index = FeatureIndex::build(features, cfg.backend)?;
    Ok(Engine::with_index(spec, params, train, cfg, cache, index)?)
}
