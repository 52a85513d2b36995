//! `gen-data` and `train`.

use std::io::Write;

use fastinf::model::{Activation, Optimizer, TrainConfig, DEFAULT_WEIGHT_DECAY};
use fastinf::synth::{bias, duplicate_point, gaussians, BiasSpec, GaussianSpec, DUPLICATE_WEIGHT_DECAY};
use fastinf::{DataPoint, Dataset, ModelSpec, Role};

use super::{check_dims, load_dataset, parsed, Run};
use crate::manifest::Outputs;
use crate::CliError;

fn save_dataset(outputs: &mut Outputs, name: &str, d: &Dataset) -> Result<(), CliError> {
    outputs.write(name, |w| d.write_to(w))?;
    Ok(())
}

pub fn gen_data(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let family: String = run.settings.get("family", "gaussians".to_string())?;
    let seed = run.seed("data");
    let s = &mut run.settings;
    match family.as_str() {
        "gaussians" => {
            let spec = GaussianSpec {
                n: s.get("n", 500)?,
                dim: s.get("dim", 2)?,
                classes: s.get("classes", 2)?,
                separation: s.get("separation", 3.0)?,
                label_noise: s.get("label_noise", 0.0)?,
            };
            let n_test = s.get("n_test", 100)?;
            s.finish()?;
            let (train, test) = gaussians(&spec, n_test, seed)?;
            save_dataset(outputs, "train.tsv", &train)?;
            save_dataset(outputs, "test.tsv", &test)?;
        }
        "duplicate" => {
            let n = s.get("n", 20)?;
            let dim = s.get("dim", 2)?;
            let mislabeled = s.get("mislabeled", false)?;
            s.finish()?;
            let fx = duplicate_point(n, dim, mislabeled, seed)?;
            let z = &fx.test_point;
            let test = Dataset::new(vec![DataPoint::new(0, z.x.clone(), z.y)], dim, 2, Role::Test)?;
            save_dataset(outputs, "train.tsv", &fx.train)?;
            save_dataset(outputs, "test.tsv", &test)?;
            let info = serde_json::json!({
                "duplicate_id": fx.duplicate_id,
                "mislabeled": mislabeled,
                "weight_decay": DUPLICATE_WEIGHT_DECAY,
            });
            outputs.write("fixture.json", |w| Ok(writeln!(w, "{}", serde_json::to_string_pretty(&info).expect("plain json"))?))?;
        }
        "bias" => {
            let d = BiasSpec::default();
            let spec = BiasSpec {
                n_train: s.get("n", d.n_train)?,
                n_validation: s.get("n_validation", d.n_validation)?,
                n_test: s.get("n_test", d.n_test)?,
                n_augmentation: s.get("n_augmentation", d.n_augmentation)?,
                dim: s.get("dim", d.dim)?,
                minority_fraction: s.get("minority_fraction", d.minority_fraction)?,
                signal: s.get("signal", d.signal)?,
                spurious: s.get("spurious", d.spurious)?,
            };
            s.finish()?;
            let fx = bias(&spec, seed)?;
            save_dataset(outputs, "train.tsv", &fx.train)?;
            save_dataset(outputs, "validation.tsv", &fx.validation)?;
            save_dataset(outputs, "test.tsv", &fx.test)?;
            save_dataset(outputs, "augmentation.tsv", &fx.augmentation)?;
            outputs.write("train_slices.csv", |w| {
                writeln!(w, "id,slice")?;
                for (id, minority) in fx.train_minority.iter().enumerate() {
                    writeln!(w, "{id},{}", if *minority { "minority" } else { "majority" })?;
                }
                Ok(())
            })?;
        }
        other => return Err(CliError::usage(format!("`family`: expected gaussians, duplicate or bias, found `{other}`"))),
    }
    Ok(())
}

pub fn train(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let init_seed = run.seed("init");
    let s = &mut run.settings;
    let train_path = s.input("train")?;
    let test_path = s.opt_input("test")?;
    let arch: String = s.get("arch", "logistic".to_string())?;
    let weight_decay: f64 = s.get("weight_decay", DEFAULT_WEIGHT_DECAY)?;
    let mlp = match arch.as_str() {
        "logistic" => None,
        "mlp" => {
            let hidden: Vec<usize> = s.list("hidden", "16")?;
            let activation: String = s.get("activation", "tanh".to_string())?;
            Some((hidden, parsed::<Activation>(&activation, "activation")?))
        }
        other => return Err(CliError::usage(format!("`arch`: expected logistic or mlp, found `{other}`"))),
    };
    let defaults = TrainConfig::default();
    let optimizer: String = s.get("optimizer", "lbfgs".to_string())?;
    let optimizer = match optimizer.as_str() {
        "lbfgs" => Optimizer::Lbfgs { memory: s.get("memory", 10)? },
        "gd" => Optimizer::GradientDescent,
        other => return Err(CliError::usage(format!("`optimizer`: expected lbfgs or gd, found `{other}`"))),
    };
    let cfg = TrainConfig {
        optimizer,
        steps: s.get("steps", defaults.steps)?,
        lr: s.get("lr", defaults.lr)?,
        tol: s.get("tol", defaults.tol)?,
        seed: init_seed,
    };
    s.finish()?;

    let train_set = load_dataset(outputs, "train", &train_path, Role::Train)?;
    let test_set = match &test_path {
        Some(p) => Some(load_dataset(outputs, "test", p, Role::Test)?),
        None => None,
    };
    let (dim, classes) = (train_set.dim(), train_set.classes());
    let spec = match mlp {
        None => ModelSpec::logistic(dim, classes, weight_decay),
        Some((hidden, activation)) => ModelSpec::mlp(dim, classes, hidden, activation, weight_decay),
    };
    spec.validate()?;
    if let Some(t) = &test_set {
        check_dims(&spec, &[("test", t)])?;
    }

    let outcome = fastinf::model::train(&spec, &train_set, &cfg)?;
    outputs.write("model.json", |w| {
        Ok(writeln!(w, "{}", serde_json::to_string_pretty(&spec).expect("model spec serializes"))?)
    })?;
    outputs.write("params.bin", |w| outcome.params.write_to(w))?;
    let mut rows = vec![("train", &train_set)];
    if let Some(t) = &test_set {
        rows.push(("test", t));
    }
    let metrics = rows
        .into_iter()
        .map(|(name, d)| spec.evaluate(&outcome.params, d.points()).map(|(l, a)| (name, d.len(), l, a)))
        .collect::<fastinf::Result<Vec<_>>>()?;
    outputs.write("metrics.csv", |w| {
        writeln!(w, "split,n,loss,accuracy")?;
        for (name, n, loss, acc) in &metrics {
            writeln!(w, "{name},{n},{loss},{acc}")?;
        }
        Ok(())
    })?;
    println!(
        "trained {} parameters in {} steps, gradient norm {:.3e}",
        spec.param_count(),
        outcome.steps,
        outcome.grad_norm
    );
    Ok(())
}
