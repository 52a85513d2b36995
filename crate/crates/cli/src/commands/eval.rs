//! `recall-eval`, `lissa-sweep`, `retrain-eval` and `benchmark`.

use std::io::Write;

use fastinf::engine::Mode;
use fastinf::eval::{benchmark as run_benchmark, loo_train_config, recall_experiment, sign_validation, standard_variants, write_recall_csv, RecallConfig};
use fastinf::lissa::{scale_with, sweep_with, write_sweep_csv, LissaConfig, ModelHessian, ScaleRule};
use fastinf::model::{train, TrainConfig};
use fastinf::nnindex::default_k;
use fastinf::synth::{gaussians, GaussianSpec};
use fastinf::{DataPoint, Dataset, ModelSpec, ParamVector, Role};

use super::{load_dataset, load_model, parsed, points_by_id, KnnSettings, Loaded, ModelInputs, Run, SolverKind, SolverSettings};
use crate::manifest::Outputs;
use crate::CliError;

/// The given ids, or the first `count` points of `test`.
fn query_points(test: &Dataset, ids: Option<Vec<usize>>, count: usize, key: &str) -> Result<Vec<DataPoint>, CliError> {
    match ids {
        Some(ids) => points_by_id(test, &ids, key),
        None => Ok(test.points().iter().take(count).cloned().collect()),
    }
}

pub fn recall_eval(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let inputs = ModelInputs::resolve(&mut run.settings, true, true)?;
    let data = Loaded::load(&inputs, outputs)?;
    let n = data.train.len();
    let s = &mut run.settings;
    let test_ids: Option<Vec<usize>> = s.opt_list("test_ids")?;
    let n_queries: usize = s.get("n_queries", 20)?;
    let default_ks = format!("{},{},{}", (n / 20).max(1), (n / 10).max(1), (n / 5).max(1));
    let ks: Vec<usize> = s.list("ks", &default_ks)?;
    let ms: Vec<usize> = s.list("ms", "10")?;
    let modes: Vec<String> = s.list("modes", "harmful,helpful,absolute")?;
    let modes = modes.iter().map(|m| parsed::<Mode>(m, "modes")).collect::<Result<Vec<_>, _>>()?;
    let knn = KnnSettings::resolve(run)?;
    let solver = SolverSettings::resolve(run, SolverKind::Auto)?;
    run.settings.finish()?;
    let mut cfg = RecallConfig::new(ks, ms, solver.provisional());
    cfg.modes = modes;
    cfg.backend = knn.backend;
    cfg.workers = run.workers;
    cfg.validate(n)?;
    let points = query_points(data.test(), test_ids, n_queries, "test_ids")?;

    cfg.solver = solver.build(&data.spec, &data.params, &data.train, run.workers)?;
    let reports = recall_experiment(&data.spec, &data.params, &data.train, &points, &cfg)?;
    outputs.write("recall.csv", |w| write_recall_csv(&reports, w))?;
    println!("{} recall row(s) over {} test point(s)", reports.len(), points.len());
    Ok(())
}

/// Parses `J=500,1000 B=1,8 T=1,4` into its axes; missing axes take the
/// LiSSA defaults.
fn parse_grid(spec: &str) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), CliError> {
    let (mut js, mut bs, mut ts) = (None, None, None);
    for token in spec.split_whitespace() {
        let (axis, values) = token
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("`grid`: expected AXIS=v1,v2,..., found `{token}`")))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::usage(format!("`grid`: `{token}` must list positive integers")))?;
        if values.is_empty() || values.contains(&0) {
            return Err(CliError::usage(format!("`grid`: `{token}` must list positive integers")));
        }
        let slot = match axis {
            "J" => &mut js,
            "B" => &mut bs,
            "T" => &mut ts,
            other => return Err(CliError::usage(format!("`grid`: unknown axis `{other}`; expected J, B or T"))),
        };
        if slot.replace(values).is_some() {
            return Err(CliError::usage(format!("`grid`: axis `{axis}` given twice")));
        }
    }
    Ok((
        js.unwrap_or_else(|| vec![LissaConfig::DEFAULT_DEPTH]),
        bs.unwrap_or_else(|| vec![LissaConfig::DEFAULT_BATCH]),
        ts.unwrap_or_else(|| vec![LissaConfig::DEFAULT_REPETITIONS]),
    ))
}

pub fn lissa_sweep(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let seed = run.seed("lissa");
    let inputs = ModelInputs::resolve(&mut run.settings, true, true)?;
    let s = &mut run.settings;
    let test_id: usize = s.get("test_id", 0)?;
    let grid: String = s.get("grid", "J=500,1000,2000 B=1,8 T=1,4".to_string())?;
    let damping: f64 = s.get("damping", LissaConfig::DEFAULT_DAMPING)?;
    let scale: Option<f64> = s.opt("scale")?;
    let rule: String = s.get("scale_rule", "per-example".to_string())?;
    let rule: ScaleRule = parsed(&rule, "scale_rule")?;
    let tol: f64 = s.get("lissa_tol", LissaConfig::DEFAULT_TOL)?;
    s.finish()?;
    let (js, bs, ts) = parse_grid(&grid)?;
    let base = LissaConfig {
        damping,
        tol,
        seed,
        ..LissaConfig::with_scale(scale.unwrap_or(1.0))
    };
    base.validate()?;

    let data = Loaded::load(&inputs, outputs)?;
    let z = points_by_id(data.test(), &[test_id], "test_id")?.remove(0);
    let op = ModelHessian::new(&data.spec, &data.params, &data.train)?;
    let scale = match scale {
        Some(s) => s,
        None => scale_with(&op, damping, rule, seed, run.workers)?,
    };
    let mut configs = Vec::new();
    for &depth in &js {
        for &batch_size in &bs {
            for &repetitions in &ts {
                configs.push(LissaConfig {
                    depth,
                    batch_size,
                    repetitions,
                    scale,
                    ..base
                });
            }
        }
    }
    let v = data.spec.grad(&data.params, [&z])?;
    let rows = sweep_with(&op, &v, &configs)?;
    outputs.write_timing("sweep.csv", |w| write_sweep_csv(&rows, w))?;
    outputs.write("sweep_errors.csv", |w| {
        writeln!(w, "config_id,J,B,T,reference,error_norm,relative_error")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.config_id,
                r.config.depth,
                r.config.batch_size,
                r.config.repetitions,
                r.is_reference,
                r.error_norm.unwrap_or(f64::NAN),
                r.relative_error.unwrap_or(f64::NAN)
            )?;
        }
        Ok(())
    })?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("config {}: {}", r.config_id, r.error.as_deref().unwrap_or_default());
    }
    println!("{} sweep row(s), sigma = {scale}", rows.len());
    Ok(())
}

pub fn retrain_eval(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let init_seed = run.seed("init");
    let inputs = ModelInputs::resolve(&mut run.settings, true, false)?;
    let s = &mut run.settings;
    let test_ids: Vec<usize> = s.list("test_id", "0")?;
    let per_side: usize = s.get("per_side", 5)?;
    let damping: f64 = s.get("damping", LissaConfig::DEFAULT_DAMPING)?;
    s.finish()?;
    if per_side == 0 || test_ids.is_empty() {
        return Err(CliError::usage("retrain-eval needs at least one test id and --per-side >= 1"));
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(CliError::usage("`damping` must be finite and non-negative"));
    }

    let train_set = load_dataset(outputs, "train", &inputs.train, Role::Train)?;
    let test = load_dataset(outputs, "test", inputs.test.as_deref().expect("resolved"), Role::Test)?;
    let (spec, _) = load_model(outputs, &inputs.model, None)?;
    super::check_dims(&spec, &[("train", &train_set), ("test", &test)])?;
    let points = points_by_id(&test, &test_ids, "test_id")?;
    if 2 * per_side > train_set.len() {
        return Err(CliError::usage("--per-side exceeds half the training set"));
    }

    let cfg = loo_train_config(init_seed);
    let mut lines = Vec::new();
    let (mut agree, mut total) = (0, 0);
    for z in &points {
        for c in sign_validation(&spec, &train_set, z, per_side, damping, &cfg)? {
            let mode = c.report.mode.map(|m| m.to_string()).unwrap_or_default();
            agree += usize::from(c.agrees());
            total += 1;
            lines.push(format!(
                "{},{},{},{},{},{},{},{}",
                z.id,
                c.train_id,
                mode,
                c.influence,
                c.report.loss_before,
                c.report.loss_after,
                c.report.delta,
                c.agrees()
            ));
        }
    }
    outputs.write("retrain.csv", |w| {
        writeln!(w, "test_id,train_id,mode,influence,loss_before,loss_after,delta,agrees")?;
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    println!("sign agreement {agree}/{total}");
    Ok(())
}

/// Built-in fixture used when `benchmark` gets no model.
fn bench_fixture(n: usize, dim: usize, n_test: usize, data_seed: u64, init_seed: u64) -> Result<(ModelSpec, ParamVector, Dataset, Dataset), CliError> {
    let spec = GaussianSpec {
        n,
        dim,
        classes: 2,
        separation: 3.0,
        label_noise: 0.1,
    };
    let (train_set, test) = gaussians(&spec, n_test, data_seed)?;
    let model = ModelSpec::logistic(dim, 2, fastinf::model::DEFAULT_WEIGHT_DECAY);
    let cfg = TrainConfig {
        seed: init_seed,
        ..TrainConfig::default()
    };
    let params = train(&model, &train_set, &cfg)?.params;
    Ok((model, params, train_set, test))
}

pub fn benchmark(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let data_seed = run.seed("data");
    let init_seed = run.seed("init");
    let scale_seed = run.seed("lissa");
    let s = &mut run.settings;
    let given = s.opt_input("model")?.is_some();
    let inputs = if given { Some(ModelInputs::resolve(s, true, true)?) } else { None };
    let (bench_n, bench_dim) = if given { (0, 0) } else { (s.get("bench_n", 2000)?, s.get("bench_dim", 8)?) };
    let test_ids: Option<Vec<usize>> = s.opt_list("test_ids")?;
    let n_queries: usize = s.get("n_queries", 3)?;
    let repetitions: usize = s.get("timing_repetitions", 2)?;
    let k: Option<usize> = s.opt("k")?;
    let scale: Option<f64> = s.opt("scale")?;
    let parallel_workers: usize = s.get("parallel_workers", 4)?;
    s.finish()?;
    if repetitions == 0 || n_queries == 0 || parallel_workers == 0 {
        return Err(CliError::usage("timing repetitions, query count and parallel workers must be positive"));
    }
    if !given && bench_n < 2 {
        return Err(CliError::usage("`bench_n` must be at least 2"));
    }

    let (spec, params, train_set, test) = match &inputs {
        Some(inputs) => {
            let d = Loaded::load(inputs, outputs)?;
            let test = d.test.clone().expect("resolved");
            (d.spec, d.params, d.train, test)
        }
        None => bench_fixture(bench_n, bench_dim, n_queries, data_seed, init_seed)?,
    };
    let points = query_points(&test, test_ids, n_queries, "test_ids")?;
    let k = k.unwrap_or_else(|| default_k(train_set.len()));
    let scale = match scale {
        Some(s) => s,
        None => {
            let op = ModelHessian::new(&spec, &params, &train_set)?;
            scale_with(&op, LissaConfig::DEFAULT_DAMPING, ScaleRule::default(), scale_seed, run.workers)?
        }
    };
    let variants = standard_variants(k, scale, parallel_workers);
    let report = run_benchmark(&spec, &params, &train_set, &variants, &points, repetitions)?;
    outputs.write_timing("benchmark.csv", |w| report.write_csv(w))?;
    outputs.write_timing("benchmark_samples.csv", |w| report.write_samples_csv(w))?;
    println!("variant,mean_s,std_s,speedup");
    for r in &report.rows {
        println!("{},{:.6},{:.6},{:.2}", r.variant, r.mean_s, r.std_s, r.speedup);
    }
    Ok(())
}
