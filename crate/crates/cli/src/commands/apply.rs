//! `correct` and `simulate`.

use std::io::Write;

use fastinf::correct::{correction_loop, evaluate_point, train_simulator, CorrectionConfig, Selection, SimSelection, SimulatabilityConfig};
use fastinf::model::TrainConfig;
use fastinf::Role;

use super::{load_dataset, parsed, points_by_id, KnnSettings, Loaded, ModelInputs, Run, SolverKind, SolverSettings};
use crate::manifest::Outputs;
use crate::CliError;

pub fn correct(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let loop_seed = run.seed("correct");
    let inputs = ModelInputs::resolve(&mut run.settings, false, true)?;
    let s = &mut run.settings;
    let validation_path = s.input("validation")?;
    let eval_path = s.input("eval")?;
    let source_path = s.opt_input("source")?;
    let selection: String = s.get("selection", "helpful".to_string())?;
    let selection: Selection = parsed(&selection, "selection")?;
    let iterations = s.get("iterations", CorrectionConfig::DEFAULT_ITERATIONS)?;
    let anchors = s.get("anchors", CorrectionConfig::DEFAULT_ANCHORS)?;
    let finetune_count = s.get("finetune_count", CorrectionConfig::DEFAULT_FINETUNE_COUNT)?;
    let lr = s.get("lr", CorrectionConfig::DEFAULT_LR)?;
    let per_anchor = s.get("per_anchor", false)?;
    let knn = KnnSettings::resolve(run)?;
    let solver = SolverSettings::resolve(run, SolverKind::Auto)?;
    run.settings.finish()?;
    let mut cfg = CorrectionConfig {
        iterations,
        anchors_per_iter: anchors,
        finetune_count,
        lr,
        per_anchor,
        use_knn: knn.k.is_some(),
        k: knn.k.unwrap_or(usize::MAX),
        backend: knn.backend,
        workers: run.workers,
        seed: loop_seed,
        ..CorrectionConfig::new(selection, solver.provisional())
    };
    cfg.validate()?;

    let data = Loaded::load(&inputs, outputs)?;
    let validation = load_dataset(outputs, "validation", &validation_path, Role::Validation)?;
    let evaldata = load_dataset(outputs, "eval", &eval_path, Role::Test)?;
    let source = match &source_path {
        Some(p) => load_dataset(outputs, "source", p, Role::Augmentation)?,
        None => data.train.clone(),
    };
    super::check_dims(&data.spec, &[("validation", &validation), ("eval", &evaldata), ("source", &source)])?;

    // The Hessian is taken over the pool the loop ranks.
    cfg.solver = solver.build(&data.spec, &data.params, &source, run.workers)?;
    let trace = correction_loop(&data.spec, &data.params, &source, &validation, &evaldata, &cfg)?;
    outputs.write("trace.csv", |w| trace.write_csv(w))?;
    outputs.write("final_params.bin", |w| trace.final_params.write_to(w))?;
    let (first, last) = (&trace.steps[0], trace.last());
    println!(
        "eval loss {:.6} -> {:.6}, accuracy {:.4} -> {:.4}",
        first.eval_loss, last.eval_loss, first.eval_accuracy, last.eval_accuracy
    );
    Ok(())
}

pub fn simulate(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let sim_seed = run.seed("simulator");
    let sel_seed = run.seed("simulate");
    let inputs = ModelInputs::resolve(&mut run.settings, true, true)?;
    let s = &mut run.settings;
    let test_ids: Option<Vec<usize>> = s.opt_list("test_ids")?;
    let n_points: usize = s.get("n_points", 10)?;
    let lr_min: f64 = s.get("lr_min", 1e-3)?;
    let lr_max: f64 = s.get("lr_max", 1.0)?;
    let lr_count: usize = s.get("lr_count", 12)?;
    let repeats: usize = s.get("repeats", 5)?;
    let selections: Option<Vec<String>> = s.opt_list("selections")?;
    let solver = SolverSettings::resolve(run, SolverKind::Auto)?;
    run.settings.finish()?;
    if lr_count == 0 || !(lr_min > 0.0 && lr_max >= lr_min && lr_max.is_finite()) {
        return Err(CliError::usage("learning rates need 0 < lr_min <= lr_max and lr_count >= 1"));
    }
    let data = Loaded::load(&inputs, outputs)?;
    let selections = match selections {
        Some(list) => list.iter().map(|x| parsed::<SimSelection>(x, "selections")).collect::<Result<Vec<_>, _>>()?,
        None => SimSelection::all(data.spec.classes),
    };
    let mut cfg = SimulatabilityConfig {
        lrs: SimulatabilityConfig::log_lrs(lr_min, lr_max, lr_count),
        selections,
        repeats,
        simulator_train: TrainConfig {
            seed: sim_seed,
            ..TrainConfig::default()
        },
        workers: run.workers,
        seed: sel_seed,
        ..SimulatabilityConfig::new(data.spec.classes, solver.provisional())
    };
    cfg.validate()?;

    let test = data.test();
    let points = match test_ids {
        Some(ids) => points_by_id(test, &ids, "test_ids")?,
        None => {
            let mut picked = Vec::new();
            for z in test.points() {
                if picked.len() == n_points {
                    break;
                }
                if data.spec.predict(&data.params, &z.x)? == z.y {
                    picked.push(z.clone());
                }
            }
            picked
        }
    };
    if points.is_empty() {
        return Err(CliError::usage("no test points to evaluate"));
    }

    cfg.solver = solver.build(&data.spec, &data.params, &data.train, run.workers)?;
    let sim = train_simulator(&data.spec, &data.params, &data.train, &cfg.simulator_train)?;
    let mut reports = Vec::with_capacity(points.len());
    for z in &points {
        reports.push(evaluate_point(&sim, &data.spec, &data.params, &data.train, z, &cfg)?);
    }
    outputs.write("simulate.csv", |w| {
        writeln!(w, "test_id,selection,lr,point_id,loss")?;
        for r in &reports {
            for c in &r.cells {
                writeln!(w, "{},{},{},{},{}", r.test_id, c.selection, c.lr, c.point_id, c.loss)?;
            }
        }
        Ok(())
    })?;
    let best_top = |r: &fastinf::correct::SimulatabilityReport, sel| {
        r.points(sel)
            .first()
            .and_then(|&id| r.best_loss(sel, id))
            .unwrap_or(f64::NAN)
    };
    let mut wins = 0;
    outputs.write("simulate_summary.csv", |w| {
        writeln!(w, "test_id,task_prediction,correct,base_loss,most_helpful,most_harmful,random_mean")?;
        for r in &reports {
            let helpful = best_top(r, SimSelection::MostHelpful);
            let random = r.random_mean().unwrap_or(f64::NAN);
            wins += usize::from(helpful <= random);
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.test_id,
                r.task_prediction,
                r.correct,
                r.base_loss,
                helpful,
                best_top(r, SimSelection::MostHarmful),
                random
            )?;
        }
        Ok(())
    })?;
    println!("most-helpful point at or below the random mean for {wins}/{} test point(s)", reports.len());
    Ok(())
}
