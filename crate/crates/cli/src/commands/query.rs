//! `influence` and `export-graph`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use fastinf::correct::{export_influence_graph, slice_statistics};
use fastinf::engine::{write_records_csv, Mode};

use super::{cached_engine, parsed, points_by_id, KnnSettings, Loaded, ModelInputs, Run, SolverKind, SolverSettings};
use crate::manifest::Outputs;
use crate::CliError;

pub fn influence(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let inputs = ModelInputs::resolve(&mut run.settings, true, true)?;
    let test_ids: Vec<usize> = run.settings.list("test_id", "")?;
    let mode: String = run.settings.get("mode", "harmful".to_string())?;
    let mode: Mode = parsed(&mode, "mode")?;
    let m: usize = run.settings.get("m", 10)?;
    let cache_gradients: bool = run.settings.get("cache_gradients", false)?;
    let knn = KnnSettings::resolve(run)?;
    let solver = SolverSettings::resolve(run, SolverKind::Lissa)?;
    run.settings.finish()?;
    if test_ids.is_empty() {
        return Err(CliError::usage("missing required setting `--test-id`"));
    }
    let mut cfg = knn.query_config(solver.provisional(), mode, m, run.workers);
    cfg.cache_gradients = cache_gradients;
    cfg.validate()?;

    let data = Loaded::load(&inputs, outputs)?;
    let points = points_by_id(data.test(), &test_ids, "test_id")?;
    cfg.solver = solver.build(&data.spec, &data.params, &data.train, run.workers)?;
    let engine = cached_engine(&data.spec, &data.params, &data.train, cfg)?;
    let mut rows = Vec::new();
    for z in &points {
        rows.extend_from_slice(engine.query(z)?.top());
    }
    outputs.write("influence.csv", |w| write_records_csv(&rows, w))?;
    println!("{} influence row(s) for {} test point(s)", rows.len(), points.len());
    Ok(())
}

/// `id,slice` table with a header row.
fn read_slices(path: &Path) -> Result<BTreeMap<usize, String>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::usage(format!("{}:{}: expected `id,slice`, found `{line}`", path.display(), i + 1));
        let (id, slice) = line.split_once(',').ok_or_else(bad)?;
        let id: usize = id.trim().parse().map_err(|_| bad())?;
        out.insert(id, slice.trim().to_string());
    }
    Ok(out)
}

pub fn export_graph(run: &mut Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let inputs = ModelInputs::resolve(&mut run.settings, true, true)?;
    let test_ids: Option<Vec<usize>> = run.settings.opt_list("test_ids")?;
    let m: usize = run.settings.get("m", 10)?;
    let mode: String = run.settings.get("mode", "absolute".to_string())?;
    let mode: Mode = parsed(&mode, "mode")?;
    let test_slices_path = run.settings.opt_input("test_slices")?;
    let train_slices_path = run.settings.opt_input("train_slices")?;
    let knn = KnnSettings::resolve(run)?;
    let solver = SolverSettings::resolve(run, SolverKind::Auto)?;
    run.settings.finish()?;
    let mut cfg = knn.query_config(solver.provisional(), mode, m, run.workers);
    cfg.validate()?;

    let data = Loaded::load(&inputs, outputs)?;
    let test = data.test();
    let ids = test_ids.unwrap_or_else(|| test.ids().collect());
    let points = points_by_id(test, &ids, "test_ids")?;
    let test_slices = match &test_slices_path {
        Some(p) => {
            outputs.record_input("test_slices", p)?;
            read_slices(p)?
        }
        None => points.iter().map(|z| (z.id, format!("label-{}", z.y))).collect(),
    };
    let train_slices = match &train_slices_path {
        Some(p) => {
            outputs.record_input("train_slices", p)?;
            read_slices(p)?
        }
        None => BTreeMap::new(),
    };
    if let Some(z) = points.iter().find(|z| !test_slices.contains_key(&z.id)) {
        return Err(CliError::usage(format!("test point {} has no slice label", z.id)));
    }

    cfg.solver = solver.build(&data.spec, &data.params, &data.train, run.workers)?;
    let engine = cached_engine(&data.spec, &data.params, &data.train, cfg)?;
    let mut records = Vec::new();
    for z in &points {
        records.extend_from_slice(engine.query(z)?.top());
    }
    let graph = export_influence_graph(&records, &test_slices, &train_slices)?;
    let stats = slice_statistics(&graph)?;
    outputs.write("graph.json", |w| {
        graph.write_json(&mut *w)?;
        w.push(b'\n');
        Ok(())
    })?;
    outputs.write("slice_stats.csv", |w| stats.write_slices_csv(w))?;
    outputs.write("slice_correlations.csv", |w| stats.write_correlations_csv(w))?;
    println!("graph with {} nodes and {} edges", graph.nodes.len(), graph.edges.len());
    Ok(())
}
