//! `fastinf`: command-line front end for fast influence functions.
//!
//! Each subcommand resolves its settings (flags over `--config` file over
//! defaults), validates them, runs, and writes its tables plus a
//! `manifest.json` into `--out`. `fastinf replay <manifest>` reruns a
//! recorded command and checks that every deterministic artifact is
//! byte-identical.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags, missing or
//! malformed inputs, invalid settings), 2 on numeric failures such as LiSSA
//! divergence or a singular Hessian, and on replay mismatches.

mod commands;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CommandKind;
use manifest::RunManifest;
use settings::{parse_config, Settings};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(fastinf::Error),
    Mismatch(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_numeric() => 2,
            CliError::Run(_) => 1,
            CliError::Mismatch(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Mismatch(m) => write!(f, "replay mismatch: {m}"),
        }
    }
}

impl From<fastinf::Error> for CliError {
    fn from(e: fastinf::Error) -> Self {
        CliError::Run(e)
    }
}

/// Declares a flag struct whose fields are all optional, plus the
/// `(key, value)` list handed to [`Settings`].
macro_rules! flags {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, Args)]
        pub struct $name {
            $($(#[$fm])* #[arg(long)] pub $field: Option<$ty>,)*
        }

        impl $name {
            pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
                vec![$((stringify!($field), self.$field.as_ref().map(FlagValue::render)),)*]
            }
        }
    };
}

trait FlagValue {
    fn render(&self) -> String;
}

impl FlagValue for String {
    fn render(&self) -> String {
        self.clone()
    }
}

impl FlagValue for Vec<String> {
    fn render(&self) -> String {
        self.join(" ")
    }
}

macro_rules! display_flag {
    ($($t:ty),*) => { $(impl FlagValue for $t { fn render(&self) -> String { self.to_string() } })* };
}
display_flag!(u64, usize, f64, bool);

flags!(
    /// Settings shared by every command that estimates s_test.
    SolverFlags {
        /// lissa, exact, or auto (exact when the model is small enough).
        solver: String,
        /// λ_d added to the Hessian.
        damping: f64,
        /// LiSSA recursion depth J.
        depth: usize,
        /// LiSSA Hessian batch size B.
        batch: usize,
        /// LiSSA repetitions T.
        repetitions: usize,
        /// LiSSA scale σ; estimated by power iteration when omitted.
        scale: f64,
        /// per-example or full-batch rule for the estimated σ.
        scale_rule: String,
        /// LiSSA early-stopping tolerance.
        lissa_tol: f64,
    }
);

flags!(
    /// Candidate restriction.
    KnnFlags {
        /// Restrict candidates to the k nearest neighbors in feature space; 0 scans everything.
        knn_k: usize,
        /// exact or graph (navigable small-world index).
        backend: String,
        /// Graph index links per node.
        hnsw_m: usize,
        /// Graph index candidate-list width.
        hnsw_ef: usize,
    }
);

flags!(GenDataFlags {
    /// gaussians, duplicate or bias.
    family: String,
    n: usize,
    n_test: usize,
    n_validation: usize,
    n_augmentation: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    label_noise: f64,
    /// Duplicate fixture: give the training copy the opposite label.
    mislabeled: bool,
    minority_fraction: f64,
    signal: f64,
    spurious: f64,
});

flags!(TrainFlags {
    train: String,
    /// Held-out set for the metrics table.
    test: String,
    /// logistic or mlp.
    arch: String,
    /// Hidden widths for mlp, comma-separated.
    hidden: String,
    activation: String,
    weight_decay: f64,
    /// lbfgs or gd.
    optimizer: String,
    memory: usize,
    steps: usize,
    lr: f64,
    tol: f64,
});

flags!(ModelFlags {
    train: String,
    test: String,
    /// model.json written by `train`.
    model: String,
    /// params.bin written by `train`.
    params: String,
});

flags!(InfluenceFlags {
    /// Test point id, or a comma-separated list.
    test_id: String,
    /// harmful, helpful or absolute.
    mode: String,
    /// Rows reported per test point.
    m: usize,
    /// Keep every training gradient in memory across queries.
    cache_gradients: bool,
});

flags!(RecallFlags {
    test_ids: String,
    /// Number of test points when --test-ids is omitted.
    n_queries: usize,
    ks: String,
    ms: String,
    modes: String,
});

flags!(SweepFlags {
    test_id: usize,
    /// Grid axes, e.g. `J=500,1000,2000 B=1,8 T=1,4`.
    #[arg(num_args = 1..)]
    grid: Vec<String>,
    damping: f64,
    scale: f64,
    scale_rule: String,
    lissa_tol: f64,
});

flags!(RetrainFlags {
    test_id: String,
    /// Most helpful and most harmful points removed, per side.
    per_side: usize,
    damping: f64,
});

flags!(BenchFlags {
    test_ids: String,
    n_queries: usize,
    /// Timed passes over the query points.
    timing_repetitions: usize,
    k: usize,
    scale: f64,
    /// Workers for the parallel variant.
    parallel_workers: usize,
    /// Built-in fixture size when no model is given.
    bench_n: usize,
    bench_dim: usize,
});

flags!(CorrectFlags {
    validation: String,
    /// Evaluation set reported in the trace.
    eval: String,
    /// Pool the fine-tuning points are drawn from; defaults to --train.
    source: String,
    /// helpful, harmful, random or z-test.
    selection: String,
    iterations: usize,
    anchors: usize,
    finetune_count: usize,
    lr: f64,
    per_anchor: bool,
});

flags!(SimulateFlags {
    test_ids: String,
    /// Number of correctly predicted test points when --test-ids is omitted.
    n_points: usize,
    lr_min: f64,
    lr_max: f64,
    lr_count: usize,
    repeats: usize,
    /// Comma-separated: random-class-<c>, most-helpful, most-harmful.
    selections: String,
});

flags!(GraphFlags {
    test_ids: String,
    /// Edges kept per test point.
    m: usize,
    mode: String,
    /// `id,slice` table for test points; slices default to `label-<y>`.
    test_slices: String,
    /// `id,slice` table for training points.
    train_slices: String,
});

#[derive(Debug, Parser)]
#[command(name = "fastinf", version, about = "Fast influence functions for small differentiable models")]
struct Cli {
    /// Root seed; every component derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Plain-text `key = value` settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for tables and the manifest.
    #[arg(long, global = true, default_value = "fastinf-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a seeded synthetic fixture.
    GenData(GenDataFlags),
    /// Fit a model and write model.json and params.bin.
    Train(TrainFlags),
    /// Rank training points by influence on test points.
    Influence {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        query: InfluenceFlags,
        #[command(flatten)]
        knn: KnnFlags,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Recall of kNN candidates against full-scan influence.
    RecallEval {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        recall: RecallFlags,
        #[command(flatten)]
        knn: KnnFlags,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// LiSSA error over a (J, B, T) grid against its most expensive cell.
    LissaSweep {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        sweep: SweepFlags,
    },
    /// Leave-one-out retraining against predicted influence signs.
    RetrainEval {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        retrain: RetrainFlags,
    },
    /// Time the full-scan and kNN pipelines.
    Benchmark {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        bench: BenchFlags,
    },
    /// Iteratively fine-tune on influential points.
    Correct {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        correct: CorrectFlags,
        #[command(flatten)]
        knn: KnnFlags,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Simulatability of the task model from influential points.
    Simulate {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        simulate: SimulateFlags,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Export the train/test influence graph and slice statistics.
    ExportGraph {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        graph: GraphFlags,
        #[command(flatten)]
        knn: KnnFlags,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Rerun a recorded command and compare its artifacts.
    Replay {
        manifest: PathBuf,
    },
}

impl Cmd {
    fn split(self) -> Result<(CommandKind, Vec<(&'static str, Option<String>)>), PathBuf> {
        Ok(match self {
            Cmd::GenData(f) => (CommandKind::GenData, f.pairs()),
            Cmd::Train(f) => (CommandKind::Train, f.pairs()),
            Cmd::Influence { model, query, knn, solver } => {
                (CommandKind::Influence, [model.pairs(), query.pairs(), knn.pairs(), solver.pairs()].concat())
            }
            Cmd::RecallEval { model, recall, knn, solver } => {
                (CommandKind::RecallEval, [model.pairs(), recall.pairs(), knn.pairs(), solver.pairs()].concat())
            }
            Cmd::LissaSweep { model, sweep } => (CommandKind::LissaSweep, [model.pairs(), sweep.pairs()].concat()),
            Cmd::RetrainEval { model, retrain } => (CommandKind::RetrainEval, [model.pairs(), retrain.pairs()].concat()),
            Cmd::Benchmark { model, bench } => (CommandKind::Benchmark, [model.pairs(), bench.pairs()].concat()),
            Cmd::Correct { model, correct, knn, solver } => {
                (CommandKind::Correct, [model.pairs(), correct.pairs(), knn.pairs(), solver.pairs()].concat())
            }
            Cmd::Simulate { model, simulate, solver } => {
                (CommandKind::Simulate, [model.pairs(), simulate.pairs(), solver.pairs()].concat())
            }
            Cmd::ExportGraph { model, graph, knn, solver } => {
                (CommandKind::ExportGraph, [model.pairs(), graph.pairs(), knn.pairs(), solver.pairs()].concat())
            }
            Cmd::Replay { manifest } => return Err(manifest),
        })
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            parse_config(&text, path)?
        }
        None => Default::default(),
    };
    let global = vec![
        ("seed", cli.seed.map(|s| s.to_string())),
        ("workers", cli.workers.map(|w| w.to_string())),
    ];
    match cli.command.split() {
        Ok((kind, pairs)) => {
            let settings = Settings::new([global, pairs].concat(), file);
            let manifest = commands::execute(kind, settings, &cli.out)?;
            println!("wrote {} artifact(s) and {} to {}", manifest.artifacts.len(), manifest::MANIFEST_NAME, cli.out.display());
            Ok(())
        }
        Err(manifest_path) => {
            if cli.config.is_some() || cli.seed.is_some() || cli.workers.is_some() {
                return Err(CliError::usage("replay takes its settings from the manifest; only --out applies"));
            }
            replay(&manifest_path, &cli.out)
        }
    }
}

fn replay(manifest_path: &Path, out: &Path) -> Result<(), CliError> {
    let original = RunManifest::load(manifest_path)?;
    let kind: CommandKind = original.command.parse()?;
    original.verify_inputs()?;
    if let Some(dir) = manifest_path.parent() {
        if dir.canonicalize().ok() == out.canonicalize().ok() {
            return Err(CliError::usage("replay output directory must differ from the recorded run's"));
        }
    }
    let fresh = commands::execute(kind, Settings::replay(original.config.clone()), out)?;
    if fresh.config != original.config || fresh.seeds != original.seeds {
        return Err(CliError::Mismatch("resolved configuration differs from the recording".into()));
    }
    println!("artifact,status");
    let mut bad = Vec::new();
    for (name, status) in manifest::compare(&original, &fresh) {
        println!("{name},{}", status.as_str());
        if matches!(status, manifest::ReplayStatus::Differs | manifest::ReplayStatus::Missing) {
            bad.push(name);
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(bad.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fastinf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
