use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn gaussian_entries(n: usize, dim: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (i, (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

/// Reference answer: sort every distance.
fn brute_force(entries: &[(usize, Vec<f64>)], q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = entries
        .iter()
        .map(|(id, v)| (*id, v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn single_entry_is_always_returned() {
    for backend in [Backend::Exact, Backend::graph()] {
        let idx = FeatureIndex::build(vec![(7, vec![1.0, 2.0])], backend).unwrap();
        let r = idx.query(&[-5.0, 3.0], 3).unwrap();
        assert_eq!(r.ids(), vec![7]);
    }
}

#[test]
fn duplicates_tie_by_ascending_id() {
    let entries = vec![(5, vec![1.0, 1.0]), (2, vec![1.0, 1.0]), (9, vec![0.0, 0.0])];
    for backend in [Backend::Exact, Backend::graph()] {
        let idx = FeatureIndex::build(entries.clone(), backend).unwrap();
        let r = idx.query(&[1.0, 1.0], 2).unwrap();
        assert_eq!(r.neighbors, vec![(2, 0.0), (5, 0.0)]);
    }
}

#[test]
fn hand_geometry() {
    let idx = FeatureIndex::build(vec![(0, vec![0.0, 0.0]), (1, vec![3.0, 4.0]), (2, vec![6.0, 8.0])], Backend::Exact).unwrap();
    let r = idx.query(&[0.0, 0.0], 2).unwrap();
    assert_eq!(r.neighbors, vec![(0, 0.0), (1, 25.0)]);
    assert_eq!(r.rank_of(1), Some(1));
    assert_eq!(r.rank_of(2), None);
}

#[test]
fn stored_vector_comes_first_and_k_at_least_n_returns_all() {
    let entries = gaussian_entries(50, 3, 1);
    let idx = FeatureIndex::build(entries.clone(), Backend::Exact).unwrap();
    let r = idx.query(&entries[17].1, 1).unwrap();
    assert_eq!(r.neighbors, vec![(17, 0.0)]);
    for k in [50, 51, 1000] {
        let mut ids = idx.query(&[0.0; 3], k).unwrap().ids();
        ids.sort();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
    }
}

#[test]
fn build_rejects_bad_input() {
    assert!(matches!(FeatureIndex::build(vec![], Backend::Exact), Err(Error::Config(_))));
    assert!(matches!(
        FeatureIndex::build(vec![(0, vec![1.0]), (1, vec![1.0, 2.0])], Backend::Exact),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        FeatureIndex::build(vec![(0, vec![1.0]), (0, vec![2.0])], Backend::Exact),
        Err(Error::Config(_))
    ));
    let idx = FeatureIndex::build(vec![(0, vec![1.0, 2.0])], Backend::Exact).unwrap();
    assert!(matches!(idx.query(&[1.0], 1), Err(Error::Config(_))));
    assert!(matches!(idx.query(&[1.0, 2.0], 0), Err(Error::Config(_))));
}

#[test]
fn graph_recall_on_gaussians() {
    let entries = gaussian_entries(1000, 16, 3);
    let exact = FeatureIndex::build(entries.clone(), Backend::Exact).unwrap();
    let graph = FeatureIndex::build(entries, Backend::graph()).unwrap();
    let queries = gaussian_entries(100, 16, 4);
    let mut hits = 0;
    for (_, q) in &queries {
        let truth = exact.query(q, 10).unwrap().ids();
        let got = graph.query(q, 10).unwrap().ids();
        hits += got.iter().filter(|id| truth.contains(id)).count();
    }
    let recall = hits as f64 / 1000.0;
    assert!(recall >= 0.95, "recall {recall}");
}

#[test]
fn graph_recall_at_larger_k() {
    let entries = gaussian_entries(2000, 8, 5);
    let exact = FeatureIndex::build(entries.clone(), Backend::Exact).unwrap();
    let graph = FeatureIndex::build(entries, Backend::graph()).unwrap();
    for k in [1, 50, 200] {
        let mut hits = 0;
        for (_, q) in gaussian_entries(20, 8, 6) {
            let truth = exact.query(&q, k).unwrap().ids();
            hits += graph.query(&q, k).unwrap().ids().iter().filter(|id| truth.contains(id)).count();
        }
        let recall = hits as f64 / (20 * k) as f64;
        assert!(recall >= 0.9, "k={k}: recall {recall}");
    }
}

#[test]
fn graph_is_deterministic() {
    let entries = gaussian_entries(300, 5, 8);
    let a = FeatureIndex::build(entries.clone(), Backend::graph()).unwrap();
    let b = FeatureIndex::build(entries, Backend::graph()).unwrap();
    let q = [0.1, -0.2, 0.3, 0.0, 1.0];
    assert_eq!(a.query(&q, 25).unwrap(), b.query(&q, 25).unwrap());
}

#[test]
fn default_k_rule() {
    assert_eq!(default_k(30), 30);
    assert_eq!(default_k(200), 50);
    assert_eq!(default_k(5000), 500);
}

#[test]
fn features_round_trip_and_cache() {
    let entries = gaussian_entries(20, 3, 9);
    let mut buf = Vec::new();
    write_features(&mut buf, &entries).unwrap();
    assert_eq!(read_features(&mut buf.as_slice()).unwrap(), entries);

    use crate::synth::{gaussians, GaussianSpec};
    let (train, _) = gaussians(&GaussianSpec { n: 30, dim: 3, classes: 2, separation: 1.0, label_noise: 0.0 }, 1, 0).unwrap();
    let spec = ModelSpec::mlp(3, 2, vec![4], crate::model::Activation::Tanh, 0.01);
    let params = spec.init_params(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::with_dir(dir.path()).unwrap();
    let first = cache.load_or_compute(&spec, &params, &train).unwrap();
    let file = dir.path().join(format!("{}.fiff", feature_cache_key(&spec, &params, &train)));
    assert!(file.exists());
    assert_eq!(cache.load_or_compute(&spec, &params, &train).unwrap(), first);
    assert_eq!(first, model_features(&spec, &params, &train).unwrap());
    let other = spec.init_params(2).unwrap();
    assert_ne!(feature_cache_key(&spec, &params, &train), feature_cache_key(&spec, &other, &train));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_scan_equals_full_sort(n in 1usize..5000, dim in 1usize..6, k in 1usize..60, seed in 0u64..1000) {
        // Coarse rounding creates many exact ties.
        let entries: Vec<(usize, Vec<f64>)> = gaussian_entries(n, dim, seed)
            .into_iter()
            .map(|(i, v)| (i, v.into_iter().map(|x| (x * 2.0).round()).collect()))
            .collect();
        let idx = FeatureIndex::build(entries.clone(), Backend::Exact).unwrap();
        let q: Vec<f64> = gaussian_entries(1, dim, seed + 1)[0].1.clone();
        prop_assert_eq!(idx.query(&q, k).unwrap().neighbors, brute_force(&entries, &q, k));
        let next = idx.query(&q, k + 1).unwrap().neighbors;
        prop_assert_eq!(&next[..k.min(n)], &idx.query(&q, k).unwrap().neighbors[..]);
    }
}
