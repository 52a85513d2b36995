use std::collections::BTreeMap;

use super::*;
use crate::data::Dataset;
use crate::engine::{influence_query, InfluenceQueryConfig, Mode, Solver};
use crate::error::Error;
use crate::model::{train, ModelSpec, ParamVector, TrainConfig};
use crate::synth::{gaussians, GaussianSpec};

const DAMPING: f64 = 0.01;

fn fixture(n: usize, dim: usize, n_test: usize, seed: u64) -> (ModelSpec, ParamVector, Dataset, Dataset) {
    let gs = GaussianSpec {
        n,
        dim,
        classes: 2,
        separation: 1.5,
        label_noise: 0.1,
    };
    let (tr, te) = gaussians(&gs, n_test, seed).unwrap();
    let spec = ModelSpec::logistic(dim, 2, 0.005);
    let params = train(&spec, &tr, &TrainConfig::default()).unwrap().params;
    (spec, params, tr, te)
}

#[test]
fn recall_counting_examples() {
    assert_eq!(recall_at_m(&[1, 2, 3, 4, 5], &[1, 2, 3, 4]).unwrap(), 1.0);
    assert_eq!(recall_at_m(&[7, 8], &[1, 2]).unwrap(), 0.0);
    assert_eq!(recall_at_m(&[2, 4, 9], &[1, 2, 3, 4]).unwrap(), 0.5);
    assert!(matches!(recall_at_m(&[1], &[]), Err(Error::Config(_))));
}

#[test]
fn recall_experiment_full_k_and_baseline() {
    let (spec, params, tr, te) = fixture(60, 3, 6, 1);
    let cfg = RecallConfig::new(vec![6, 15, 60], vec![3, 5], Solver::Exact { damping: DAMPING });
    let reports = recall_experiment(&spec, &params, &tr, te.points(), &cfg).unwrap();
    for r in &reports {
        assert_eq!(r.baseline, r.k as f64 / 60.0);
        assert!(r.recalls.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        if r.k == 60 {
            assert_eq!(r.mean, 1.0, "{:?}", r);
        }
    }
    let all = reports.iter().filter(|r| r.split == Split::All).count();
    assert_eq!(all, 3 * 2 * 3);
    for r in reports.iter().filter(|r| r.split == Split::Correct) {
        let partner = reports
            .iter()
            .find(|o| (o.k, o.m, o.mode, o.split) == (r.k, r.m, r.mode, Split::All))
            .unwrap();
        assert!(r.recalls.len() <= partner.recalls.len());
    }
}

#[test]
fn recall_is_monotone_in_k() {
    let (spec, params, tr, te) = fixture(120, 4, 10, 2);
    let ks: Vec<usize> = vec![5, 10, 20, 40, 80, 120];
    let cfg = RecallConfig::new(ks.clone(), vec![10], Solver::Exact { damping: DAMPING });
    let reports = recall_experiment(&spec, &params, &tr, te.points(), &cfg).unwrap();
    for mode in Mode::ALL {
        let means: Vec<f64> = ks
            .iter()
            .map(|&k| reports.iter().find(|r| r.k == k && r.mode == mode && r.split == Split::All).unwrap().mean)
            .collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]), "{mode}: {means:?}");
    }
}

#[test]
fn recall_config_is_validated() {
    let (spec, params, tr, te) = fixture(20, 2, 2, 3);
    let bad = RecallConfig::new(vec![5], vec![30], Solver::Exact { damping: DAMPING });
    assert!(matches!(recall_experiment(&spec, &params, &tr, te.points(), &bad), Err(Error::Config(_))));
    let empty = RecallConfig::new(vec![], vec![3], Solver::Exact { damping: DAMPING });
    assert!(matches!(recall_experiment(&spec, &params, &tr, te.points(), &empty), Err(Error::Config(_))));
}

#[test]
fn correlation_examples() {
    let a = [0.3, -1.0, 2.5, 4.0, 0.0];
    let r = correlate(&a, &a).unwrap();
    assert_eq!((r.pearson, r.spearman, r.kendall, r.n), (1.0, 1.0, 1.0, 5));

    let b: Vec<f64> = a.iter().map(|x| -x * x * x).collect();
    let r = correlate(&a, &b).unwrap();
    assert_eq!((r.spearman, r.kendall), (-1.0, -1.0));

    // Pairs: 5 concordant, 1 discordant.
    let k = kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((k - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn tie_handling() {
    assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    let (a, b) = ([1.0, 1.0, 2.0, 3.0], [1.0, 2.0, 2.0, 3.0]);
    // C = 4, D = 0, one pair tied in each: 4 / sqrt(5 * 5).
    assert_eq!(kendall_counts(&a, &b), (4, 0, 1, 1));
    assert!((kendall_tau_b(&a, &b).unwrap() - 0.8).abs() < 1e-15);
    // Ranks (1.5, 1.5, 3, 4) vs (1, 2.5, 2.5, 4): covariance 2.5 over variance 3.
    assert!((spearman(&a, &b).unwrap() - 2.5 / 3.0).abs() < 1e-15);
}

#[test]
fn degenerate_and_malformed_inputs() {
    assert!(matches!(correlate(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateInput(_))));
    assert!(matches!(correlate(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::DegenerateInput(_))));
    assert!(matches!(correlate(&[1.0], &[1.0]), Err(Error::Config(_))));
    assert!(matches!(correlate(&[1.0, 2.0], &[1.0]), Err(Error::Config(_))));
    assert!(correlate(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Every ordering of n ≤ 8 distinct values: Kendall from integer inversion
/// counts, Spearman from `1 - 6Σd²/(n(n²-1))`, Pearson of rank vectors
/// equal to Spearman.
#[test]
fn brute_force_over_all_permutations() {
    for n in 2..=8usize {
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let pairs = (n * (n - 1) / 2) as i64;
        for p in permutations(n) {
            let b: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let mut inversions = 0i64;
            for i in 0..n {
                for j in i + 1..n {
                    if p[i] > p[j] {
                        inversions += 1;
                    }
                }
            }
            // tau = (C - D) / pairs with D = inversions.
            let num = pairs - 2 * inversions;
            let k = kendall_tau_b(&a, &b).unwrap();
            assert!((k * pairs as f64 - num as f64).abs() < 1e-12, "{p:?}");
            let (c, d, ta, tb) = kendall_counts(&a, &b);
            assert_eq!((c as i64 - d as i64, ta, tb), (num, 0, 0));

            let d2: i64 = p.iter().enumerate().map(|(i, &v)| (i as i64 - v as i64).pow(2)).sum();
            let nn = n as i64;
            let rho = 1.0 - 6.0 * d2 as f64 / (nn * (nn * nn - 1)) as f64;
            assert!((spearman(&a, &b).unwrap() - rho).abs() < 1e-12, "{p:?}");
            assert!((pearson(&a, &b).unwrap() - rho).abs() < 1e-12, "{p:?}");
        }
    }
}

#[test]
fn shared_support_correlation() {
    let a: BTreeMap<usize, f64> = [(1, 1.0), (2, 2.0), (3, 3.0), (9, 100.0)].into();
    let b: BTreeMap<usize, f64> = [(1, 2.0), (2, 4.0), (3, 6.5), (5, -1.0)].into();
    let r = correlate_shared(&a, &b).unwrap();
    assert_eq!(r.n, 3);
    assert_eq!(r.spearman, 1.0);
}

#[test]
fn empty_removal_changes_nothing() {
    let (spec, _, tr, te) = fixture(20, 3, 1, 4);
    let r = loo_retrain(&spec, &tr, &[], &te.points()[0], &loo_train_config(0)).unwrap();
    assert_eq!(r.delta, 0.0);
    assert_eq!(r.m_remove, 0);
    assert!(r.loss_before.is_finite());
    assert!(matches!(
        loo_retrain(&spec, &tr, &[99], &te.points()[0], &loo_train_config(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn retraining_is_deterministic_and_counts_unique_removals() {
    let (spec, _, tr, te) = fixture(20, 3, 1, 5);
    let oracle = LooOracle::new(&spec, &tr, loo_train_config(0)).unwrap();
    let a = oracle.remove(&[3, 3, 7], &te.points()[0]).unwrap();
    let b = oracle.remove(&[3, 7], &te.points()[0]).unwrap();
    assert_eq!(a.m_remove, 2);
    assert_eq!(a.loss_after, b.loss_after);
}

#[test]
fn removing_extremes_moves_loss_as_predicted() {
    let (spec, _, tr, te) = fixture(20, 3, 3, 6);
    let z = &te.points()[0];
    let oracle = LooOracle::new(&spec, &tr, loo_train_config(0)).unwrap();
    let cfg = InfluenceQueryConfig::full_scan(Solver::Exact { damping: DAMPING });
    let helpful = influence_query(&spec, oracle.base_params(), &tr, z, &InfluenceQueryConfig { mode: Mode::Helpful, ..cfg.clone() }).unwrap();
    let harmful = influence_query(&spec, oracle.base_params(), &tr, z, &cfg).unwrap();
    assert!(helpful[0].value < 0.0 && harmful[0].value > 0.0);
    assert!(oracle.remove(&[helpful[0].train_id], z).unwrap().delta > 0.0);
    assert!(oracle.remove(&[harmful[0].train_id], z).unwrap().delta < 0.0);
}

#[test]
fn first_order_prediction_tracks_retraining() {
    // Δloss ≈ -I/N for small removals on a smooth, well-conditioned fit.
    let (spec, _, tr, te) = fixture(80, 2, 1, 7);
    let checks = sign_validation(&spec, &tr, &te.points()[0], 3, 0.0, &loo_train_config(0)).unwrap();
    assert_eq!(checks.len(), 6);
    for c in &checks {
        assert!(c.agrees(), "{c:?}");
        let predicted = -c.influence / tr.len() as f64;
        assert!((c.report.delta - predicted).abs() <= 0.5 * predicted.abs(), "{c:?}");
    }
}

#[test]
fn benchmark_table() {
    let (spec, params, tr, te) = fixture(100, 3, 2, 8);
    let scale = crate::lissa::default_scale(&spec, &params, &tr, DAMPING, 0).unwrap();
    let variants = standard_variants(20, scale, 2);
    let report = benchmark(&spec, &params, &tr, &variants, te.points(), 2).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.rows[0].speedup, 1.0);
    for r in &report.rows {
        assert_eq!(r.samples.len(), 4);
        assert!(r.mean_s > 0.0 && r.std_s >= 0.0);
        assert!((r.speedup - report.rows[0].mean_s / r.mean_s).abs() < 1e-12 || r.variant == report.rows[0].variant);
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "variant,mean_s,std_s,speedup");
    assert_eq!(text.lines().count(), 5);

    let same = vec![variants[2].clone(), variants[2].clone()];
    let r = benchmark(&spec, &params, &tr, &same, te.points(), 1).unwrap();
    assert_eq!(r.rows[0].speedup, 1.0);
    assert!(benchmark(&spec, &params, &tr, &[], te.points(), 1).is_err());
}
