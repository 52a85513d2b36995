//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers (`3 7`) to run a subset.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fastinf::correct::{correction_loop, evaluate_point, train_simulator, CorrectionConfig, Selection, SimSelection, SimulatabilityConfig};
use fastinf::engine::{influence_query, influence_query_parallel, Engine, InfluenceQueryConfig, Mode, Solver};
use fastinf::eval::{
    benchmark, correlate_shared, kendall_counts, kendall_tau_b, loo_train_config, pearson, recall_experiment, sign_validation,
    spearman, standard_variants, RecallConfig, Split,
};
use fastinf::lissa::{default_scale, estimate_ihvp, ihvp_exact, LissaConfig};
use fastinf::model::{train, Activation, TrainConfig};
use fastinf::synth::{bias, gaussians, BiasSpec, GaussianSpec};
use fastinf::{DataPoint, Dataset, GradVector, ModelSpec, ParamVector};

type Outcome = Result<(bool, String), fastinf::Error>;

const DAMPING: f64 = 0.01;

struct Fitted {
    spec: ModelSpec,
    params: ParamVector,
    train: Dataset,
    test: Dataset,
}

fn fit(gs: GaussianSpec, n_test: usize, seed: u64, spec: ModelSpec, cfg: &TrainConfig) -> Result<Fitted, fastinf::Error> {
    let (train_set, test) = gaussians(&gs, n_test, seed)?;
    let params = train(&spec, &train_set, cfg)?.params;
    Ok(Fitted {
        spec,
        params,
        train: train_set,
        test,
    })
}

/// 20 points, binary logistic in three dimensions: P = 4.
fn twenty_point() -> Result<Fitted, fastinf::Error> {
    let gs = GaussianSpec {
        n: 20,
        dim: 3,
        classes: 2,
        separation: 1.5,
        label_noise: 0.1,
    };
    fit(gs, 5, 0, ModelSpec::logistic(3, 2, 0.005), &TrainConfig::default())
}

/// N = 2000, four classes in five dimensions: P = 24.
fn two_thousand() -> Result<Fitted, fastinf::Error> {
    let gs = GaussianSpec {
        n: 2000,
        dim: 5,
        classes: 4,
        separation: 3.0,
        label_noise: 0.1,
    };
    fit(gs, 20, 0, ModelSpec::logistic(5, 4, 0.005), &TrainConfig::default())
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn with_offset(params: &ParamVector, dir: &[f64], h: f64) -> ParamVector {
    params.axpy(h, dir).expect("same layout")
}

fn derivatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_grad, mut worst_hvp) = (0.0f64, 0.0f64);
    for sample in 0..50 {
        let dim = rng.random_range(2..6);
        let classes = if sample % 2 == 0 { 2 } else { rng.random_range(3..5) };
        let spec = match sample % 3 {
            0 => ModelSpec::logistic(dim, classes, 0.01),
            1 => ModelSpec::mlp(dim, classes, vec![rng.random_range(3..7)], Activation::Tanh, 0.01),
            _ => ModelSpec::mlp(dim, classes, vec![5, 3], Activation::Tanh, 0.0),
        };
        let p = spec.param_count();
        let values: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = with_offset(&spec.init_params(0)?, &values, 1.0);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = DataPoint::new(0, x, rng.random_range(0..classes));

        let g = spec.grad(&params, [&z])?;
        let h = 1e-5;
        let mut fd = vec![0.0; p];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            let up = spec.loss(&with_offset(&params, &e, h), &z)?;
            let down = spec.loss(&with_offset(&params, &e, -h), &z)?;
            *slot = (up - down) / (2.0 * h);
        }
        worst_grad = worst_grad.max(rel_l2(&g.values, &fd));

        let v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = spec.hvp(&params, [&z], &GradVector::new(v.clone()))?;
        let up = spec.grad(&with_offset(&params, &v, h), [&z])?;
        let down = spec.grad(&with_offset(&params, &v, -h), [&z])?;
        let fd: Vec<f64> = up.values.iter().zip(&down.values).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        worst_hvp = worst_hvp.max(rel_l2(&hv.values, &fd));
    }
    Ok((
        worst_grad <= 1e-4 && worst_hvp <= 1e-4,
        format!("max relative error: grad {worst_grad:.2e}, hvp {worst_hvp:.2e} over 50 samples"),
    ))
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Closed-form binary logistic pieces: per-point gradients and the damped
/// mean Hessian, with parameters laid out as weights then bias.
struct LogisticOracle {
    theta: DVector<f64>,
    wd: f64,
}

impl LogisticOracle {
    fn new(spec: &ModelSpec, params: &ParamVector) -> Self {
        Self {
            theta: DVector::from_column_slice(params.values()),
            wd: spec.weight_decay,
        }
    }

    fn augmented(x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len() + 1, x.iter().copied().chain([1.0]))
    }

    fn grad(&self, z: &DataPoint) -> DVector<f64> {
        let x = Self::augmented(&z.x);
        &x * (sigmoid(self.theta.dot(&x)) - z.y as f64) + &self.theta * self.wd
    }

    fn hessian(&self, train: &Dataset, damping: f64) -> DMatrix<f64> {
        let p = self.theta.len();
        let mut h = DMatrix::identity(p, p) * (self.wd + damping);
        let n = train.len() as f64;
        for z in train.points() {
            let x = Self::augmented(&z.x);
            let pr = sigmoid(self.theta.dot(&x));
            h += &x * x.transpose() * (pr * (1.0 - pr) / n);
        }
        h
    }
}

fn exact_oracle() -> Outcome {
    let f = twenty_point()?;
    let oracle = LogisticOracle::new(&f.spec, &f.params);
    let lu = oracle.hessian(&f.train, DAMPING).lu();
    let cfg = InfluenceQueryConfig::full_scan(Solver::Exact { damping: DAMPING });
    let mut worst = 0.0f64;
    let mut count = 0;
    for z_test in f.test.points() {
        let s = lu.solve(&oracle.grad(z_test)).expect("positive definite");
        for r in influence_query(&f.spec, &f.params, &f.train, z_test, &cfg)? {
            let want = -s.dot(&oracle.grad(&f.train.points()[r.train_id]));
            worst = worst.max((r.value - want).abs());
            count += 1;
        }
    }
    Ok((
        worst <= 1e-8 && count == 20 * f.test.len(),
        format!("max |error| {worst:.2e} over {count} (test, train) pairs, P = {}", f.spec.param_count()),
    ))
}

fn lissa_fixture(seed: u64) -> Result<Fitted, fastinf::Error> {
    let gs = GaussianSpec {
        n: 200,
        dim: 4,
        classes: 2,
        separation: 1.0,
        label_noise: 0.1,
    };
    fit(gs, 1, seed, ModelSpec::logistic(4, 2, 0.005), &TrainConfig::default())
}

const TREND_SEEDS: u64 = 32;

fn lissa_convergence() -> Outcome {
    let mut errors = Vec::new();
    for seed in 0..10 {
        let f = lissa_fixture(seed)?;
        let v = f.spec.grad(&f.params, [&f.test.points()[0]])?;
        let cfg = LissaConfig {
            depth: 2000,
            batch_size: 8,
            repetitions: 4,
            ..LissaConfig::defaults_for(&f.spec, &f.params, &f.train)?
        };
        let est = estimate_ihvp(&f.spec, &f.params, &f.train, &v, &cfg)?;
        let exact = ihvp_exact(&f.spec, &f.params, &f.train, &v, cfg.damping)?;
        errors.push(rel_l2(&est.values.values, &exact.values));
    }
    let within = errors.iter().filter(|&&e| e <= 0.05).count();

    // Trend on fixture 0, averaged over sampling seeds: error falls with B
    // at every J and with J at every B.
    let f = lissa_fixture(0)?;
    let v = f.spec.grad(&f.params, [&f.test.points()[0]])?;
    let base = LissaConfig::defaults_for(&f.spec, &f.params, &f.train)?;
    let exact = ihvp_exact(&f.spec, &f.params, &f.train, &v, base.damping)?;
    let (bs, js) = ([1usize, 8, 32], [100usize, 500, 2000]);
    let mut grid = [[0.0f64; 3]; 3];
    for (bi, &b) in bs.iter().enumerate() {
        for (ji, &j) in js.iter().enumerate() {
            let mut total = 0.0;
            for s in 0..TREND_SEEDS {
                let cfg = LissaConfig {
                    depth: j,
                    batch_size: b,
                    repetitions: 4,
                    tol: 0.0,
                    seed: 1000 * s,
                    ..base
                };
                total += rel_l2(&estimate_ihvp(&f.spec, &f.params, &f.train, &v, &cfg)?.values.values, &exact.values);
            }
            grid[bi][ji] = total / TREND_SEEDS as f64;
        }
    }
    let by_j = (0..3).all(|b| (1..3).all(|j| grid[b][j] <= grid[b][j - 1]));
    let by_b = (0..3).all(|j| (1..3).all(|b| grid[b][j] <= grid[b - 1][j]));
    let shown: Vec<String> = errors.iter().map(|e| format!("{:.3}", e)).collect();
    let trend: Vec<String> = grid.iter().map(|row| row.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join("/")).collect();
    Ok((
        within == 10 && by_b && by_j,
        format!(
            "{within}/10 fixtures within 5% [{}]; mean error by B=1,8,32 (J=100/500/2000): {}; falls with B: {by_b}, with J: {by_j}",
            shown.join(" "),
            trend.join(" ")
        ),
    ))
}

fn fast_vs_full() -> Outcome {
    let f = two_thousand()?;
    let n = f.train.len();
    let scale = default_scale(&f.spec, &f.params, &f.train, DAMPING, 0)?;
    let fast = Engine::new(
        &f.spec,
        &f.params,
        &f.train,
        InfluenceQueryConfig::knn(n / 5, Solver::Lissa(LissaConfig::with_scale(scale))),
    )?;
    let full = Engine::new(&f.spec, &f.params, &f.train, InfluenceQueryConfig::full_scan(Solver::Exact { damping: DAMPING }))?;
    let mut rhos = Vec::new();
    for z in f.test.points() {
        rhos.push(correlate_shared(&fast.query(z)?.values(), &full.query(z)?.values())?.spearman);
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        mean >= 0.95 && rhos.len() == 20,
        format!("mean Spearman {mean:.4} (min {min:.4}) over {} test points, k = {}", rhos.len(), n / 5),
    ))
}

fn knn_recall() -> Outcome {
    let f = two_thousand()?;
    let ks = vec![50, 100, 200, 400, 1000, 2000];
    let mut cfg = RecallConfig::new(ks.clone(), vec![10], Solver::Exact { damping: DAMPING });
    cfg.modes = vec![Mode::Absolute];
    let reports: Vec<_> = recall_experiment(&f.spec, &f.params, &f.train, f.test.points(), &cfg)?
        .into_iter()
        .filter(|r| r.split == Split::All)
        .collect();
    let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    let at200 = reports.iter().find(|r| r.k == 200).map(|r| (r.mean, r.baseline)).expect("k = 200 requested");
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = ks.iter().zip(&means).map(|(k, m)| format!("{k}:{m:.3}")).collect();
    Ok((
        at200.0 >= 3.0 * at200.1 && monotone,
        format!("R@10 at k=200 {:.3} vs 3x baseline {:.3}; by k {}", at200.0, 3.0 * at200.1, shown.join(" ")),
    ))
}

fn loo_signs() -> Outcome {
    let f = twenty_point()?;
    let checks = sign_validation(&f.spec, &f.train, &f.test.points()[0], 5, DAMPING, &loo_train_config(0))?;
    let agree = checks.iter().filter(|c| c.agrees()).count();
    Ok((agree >= 8 && checks.len() == 10, format!("{agree}/{} sign agreements", checks.len())))
}

fn parallel_and_speed() -> Outcome {
    let f = two_thousand()?;
    let scale = default_scale(&f.spec, &f.params, &f.train, DAMPING, 0)?;
    let cfg = InfluenceQueryConfig {
        mode: Mode::Absolute,
        ..InfluenceQueryConfig::knn(400, Solver::Lissa(LissaConfig::with_scale(scale)))
    };
    let mut identical = true;
    for z in f.test.points().iter().take(5) {
        let one = influence_query(&f.spec, &f.params, &f.train, z, &cfg)?;
        let four = influence_query_parallel(&f.spec, &f.params, &f.train, z, &cfg, 4)?;
        identical &= one == four;
    }

    let gs = GaussianSpec {
        n: 50_000,
        dim: 20,
        classes: 2,
        separation: 3.0,
        label_noise: 0.1,
    };
    // The timing comparison does not need a fully converged fit.
    let short = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let big = fit(gs, 3, 0, ModelSpec::mlp(20, 2, vec![90], Activation::Tanh, 0.005), &short)?;
    let n = big.train.len();
    let scale = default_scale(&big.spec, &big.params, &big.train, DAMPING, 0)?;
    let variants = standard_variants(n / 10, scale, 4);
    let report = benchmark(&big.spec, &big.params, &big.train, &variants, big.test.points(), 2)?;
    let (full, fast, par) = (&report.rows[0], &report.rows[2], &report.rows[3]);
    let ratio = par.mean_s / fast.mean_s;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok((
        identical && fast.speedup >= 5.0 && ratio <= 0.6,
        format!(
            "workers 4 vs 1 identical={identical}; N = {n}, P = {}: {} {:.1}x vs {}; {} / {} wall-time {ratio:.2} on {workers} core(s)",
            big.spec.param_count(),
            fast.variant,
            fast.speedup,
            full.variant,
            par.variant,
            fast.variant
        ),
    ))
}

fn bias_model(seed: u64) -> Result<(ModelSpec, ParamVector, fastinf::synth::BiasFixture), fastinf::Error> {
    let fx = bias(&BiasSpec::default(), seed)?;
    let spec = ModelSpec::logistic(fx.train.dim(), 2, 0.005);
    let params = train(&spec, &fx.train, &TrainConfig::default())?.params;
    Ok((spec, params, fx))
}

fn correction() -> Outcome {
    let (mut helpful_wins, mut harmful_worse) = (0, 0);
    let mut shown = Vec::new();
    for seed in 0..3 {
        let (spec, params, fx) = bias_model(seed)?;
        let mut finals = BTreeMap::new();
        for selection in [Selection::Helpful, Selection::Random, Selection::Harmful] {
            let cfg = CorrectionConfig {
                lr: 0.01,
                seed,
                ..CorrectionConfig::new(selection, Solver::Exact { damping: DAMPING })
            };
            let trace = correction_loop(&spec, &params, &fx.train, &fx.validation, &fx.test, &cfg)?;
            finals.insert(selection.to_string(), trace.last().eval_loss);
        }
        let (h, r, x) = (finals["helpful"], finals["random"], finals["harmful"]);
        helpful_wins += usize::from(h < r);
        harmful_worse += usize::from(x > r);
        shown.push(format!("seed {seed}: {h:.4}/{r:.4}/{x:.4}"));
    }
    Ok((
        helpful_wins >= 2 && harmful_worse >= 2,
        format!(
            "helpful < random in {helpful_wins}/3, harmful > random in {harmful_worse}/3; final eval loss helpful/random/harmful {}",
            shown.join(", ")
        ),
    ))
}

fn simulatability() -> Outcome {
    let (spec, params, fx) = bias_model(0)?;
    let cfg = SimulatabilityConfig::new(2, Solver::Exact { damping: DAMPING });
    let sim = train_simulator(&spec, &params, &fx.train, &cfg.simulator_train)?;
    let mut points = Vec::new();
    for z in fx.test.points() {
        if points.len() == 10 {
            break;
        }
        if spec.predict(&params, &z.x)? == z.y {
            points.push(z.clone());
        }
    }
    let mut wins = 0;
    for z in &points {
        let r = evaluate_point(&sim, &spec, &params, &fx.train, z, &cfg)?;
        let top = r.points(SimSelection::MostHelpful)[0];
        let helpful = r.best_loss(SimSelection::MostHelpful, top).expect("cells for the top point");
        wins += usize::from(helpful <= r.random_mean().expect("random selections"));
    }
    Ok((
        wins >= 6 && points.len() == 10,
        format!("most-helpful at or below random for {wins}/{} correctly predicted test points", points.len()),
    ))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Twice the average rank of each entry, as integers.
fn doubled_ranks(a: &[i64]) -> Vec<i64> {
    a.iter()
        .map(|x| {
            let below = a.iter().filter(|y| *y < x).count() as i64;
            let equal = a.iter().filter(|y| *y == x).count() as i64;
            2 * below + equal + 1
        })
        .collect()
}

/// Pearson correlation of integer data as `(num, den)` with `r = num / sqrt(den)`.
fn pearson_ratio(a: &[i64], b: &[i64]) -> (i128, i128) {
    let n = a.len() as i128;
    let (sa, sb): (i128, i128) = (a.iter().map(|&x| x as i128).sum(), b.iter().map(|&x| x as i128).sum());
    let sab: i128 = a.iter().zip(b).map(|(&x, &y)| (x * y) as i128).sum();
    let saa: i128 = a.iter().map(|&x| (x * x) as i128).sum();
    let sbb: i128 = b.iter().map(|&y| (y * y) as i128).sum();
    (n * sab - sa * sb, (n * saa - sa * sa) * (n * sbb - sb * sb))
}

/// Tau-b as `(num, den)` by enumerating pairs.
fn kendall_ratio(a: &[i64], b: &[i64]) -> (i128, i128) {
    let (mut c, mut d, mut ta, mut tb) = (0i128, 0i128, 0i128, 0i128);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (x, y) = ((a[i] - a[j]).signum(), (b[i] - b[j]).signum());
            match (x, y) {
                (0, 0) => {}
                (0, _) => ta += 1,
                (_, 0) => tb += 1,
                _ if x == y => c += 1,
                _ => d += 1,
            }
        }
    }
    (c - d, (c + d + ta) * (c + d + tb))
}

/// `got` equals `num / sqrt(den)`: same sign, and `got² · den` equals
/// `num²` to relative precision `tol`.
fn matches_ratio(got: f64, (num, den): (i128, i128), tol: f64) -> bool {
    if num == 0 {
        return got.abs() <= tol;
    }
    let want = num as f64 / (den as f64).sqrt();
    got.signum() == want.signum() && ((got * got * den as f64) / (num * num) as f64 - 1.0).abs() <= tol
}

/// Moment sums round at every step; tau-b rounds once in the division and
/// once in the square root.
const MOMENT_TOL: f64 = 1e-12;
const TAU_TOL: f64 = 8.0 * f64::EPSILON;

fn correlations() -> Outcome {
    let mut cases = 0usize;
    let mut failures = Vec::new();
    let mut check = |a: &[i64], b: &[i64]| {
        let (fa, fb): (Vec<f64>, Vec<f64>) = (a.iter().map(|&x| x as f64).collect(), b.iter().map(|&x| x as f64).collect());
        cases += 1;
        let ok = matches_ratio(pearson(&fa, &fb).unwrap_or(f64::NAN), pearson_ratio(a, b), MOMENT_TOL)
            && matches_ratio(spearman(&fa, &fb).unwrap_or(f64::NAN), pearson_ratio(&doubled_ranks(a), &doubled_ranks(b)), MOMENT_TOL)
            && matches_ratio(kendall_tau_b(&fa, &fb).unwrap_or(f64::NAN), kendall_ratio(a, b), TAU_TOL);
        let (c, d, _, _) = kendall_counts(&fa, &fb);
        let (num, _) = kendall_ratio(a, b);
        if !ok || c as i128 - d as i128 != num {
            failures.push(format!("{a:?} vs {b:?}"));
        }
    };
    for n in 2..=8 {
        let identity: Vec<i64> = (0..n as i64).collect();
        // Ties in both sequences: values paired off as 0,0,1,1,...
        let tied: Vec<i64> = (0..n as i64).map(|i| i / 2).collect();
        for p in permutations(n) {
            let perm: Vec<i64> = p.iter().map(|&i| i as i64).collect();
            check(&identity, &perm);
            let shuffled: Vec<i64> = p.iter().map(|&i| tied[i]).collect();
            if n >= 3 && shuffled.iter().any(|&x| x != shuffled[0]) {
                check(&tied, &shuffled);
                check(&perm, &shuffled);
            }
        }
    }
    let shown = failures.first().cloned().unwrap_or_default();
    Ok((failures.is_empty(), format!("{cases} cases, {} mismatches {shown}", failures.len())))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "derivative correctness", limit: Duration::from_secs(10), run: derivatives },
        Criterion { id: 2, name: "exact influence oracle", limit: Duration::from_secs(5), run: exact_oracle },
        Criterion { id: 3, name: "LiSSA convergence", limit: Duration::from_secs(60), run: lissa_convergence },
        Criterion { id: 4, name: "fast vs full agreement", limit: Duration::from_secs(300), run: fast_vs_full },
        Criterion { id: 5, name: "kNN recall", limit: Duration::from_secs(300), run: knn_recall },
        Criterion { id: 6, name: "LOO sign validation", limit: Duration::from_secs(120), run: loo_signs },
        Criterion { id: 7, name: "parallel determinism and speedup", limit: Duration::from_secs(900), run: parallel_and_speed },
        Criterion { id: 8, name: "correction loop efficacy", limit: Duration::from_secs(600), run: correction },
        Criterion { id: 9, name: "simulatability", limit: Duration::from_secs(600), run: simulatability },
        Criterion { id: 10, name: "correlation estimators", limit: Duration::from_secs(10), run: correlations },
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((pass, detail)) => (pass && elapsed <= c.limit, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} {:>2} {}: {} ({:.1} s, limit {} s)",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
