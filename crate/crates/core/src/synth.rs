//! Seeded synthetic fixture families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::dot;
use crate::data::{DataPoint, Dataset, Role};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Gaussian class clusters: class means are drawn once per seed as Gaussian
/// vectors scaled to norm `separation`; points add unit-variance noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    /// Fraction of points whose label is replaced by a uniformly random class.
    pub label_noise: f64,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn class_means(spec: &GaussianSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "means"));
    (0..spec.classes)
        .map(|_| {
            let v = gaussian_vec(&mut rng, spec.dim);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| a * spec.separation / n).collect()
        })
        .collect()
}

fn sample_gaussians(spec: &GaussianSpec, means: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<DataPoint> {
    (0..n)
        .map(|i| {
            let y = i % spec.classes;
            let noise = gaussian_vec(rng, spec.dim);
            let x = means[y].iter().zip(noise).map(|(m, e)| m + e).collect();
            let y = if rng.random::<f64>() < spec.label_noise {
                rng.random_range(0..spec.classes)
            } else {
                y
            };
            DataPoint::new(i, x, y)
        })
        .collect()
}

/// A training set of `spec.n` points and a held-out set of `n_test` points
/// drawn from the same clusters.
pub fn gaussians(spec: &GaussianSpec, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.n == 0 || spec.dim == 0 || spec.classes < 2 {
        return Err(Error::Config("gaussian fixture needs n, dim > 0 and C >= 2".into()));
    }
    let means = class_means(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train"));
    let train = sample_gaussians(spec, &means, spec.n, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "test"));
    let test = sample_gaussians(spec, &means, n_test.max(1), &mut rng);
    Ok((
        Dataset::new(train, spec.dim, spec.classes, Role::Train)?,
        Dataset::new(test, spec.dim, spec.classes, Role::Test)?,
    ))
}

/// The duplicate-point fixture: a small binary Gaussian training set whose
/// point 0 is an exact copy of the test point. Clusters are tight, and the
/// copy sits a little past the class boundary and off to the side, which
/// makes it the hardest, highest-leverage point in the set. Its
/// self-influence then dominates under [`DUPLICATE_WEIGHT_DECAY`]. With
/// `mislabeled`, the training copy carries the opposite label.
#[derive(Debug, Clone)]
pub struct DuplicateFixture {
    pub train: Dataset,
    pub test_point: DataPoint,
    pub duplicate_id: usize,
}

/// Weight decay for a logistic model fit on [`duplicate_point`] data.
pub const DUPLICATE_WEIGHT_DECAY: f64 = 0.05;
const DUP_SPREAD: f64 = 0.2;
const DUP_ACROSS: f64 = 0.3;
const DUP_LATERAL: f64 = 1.0;

pub fn duplicate_point(n: usize, dim: usize, mislabeled: bool, seed: u64) -> Result<DuplicateFixture> {
    if n < 2 {
        return Err(Error::Config("duplicate fixture needs at least two points".into()));
    }
    let spec = GaussianSpec {
        n,
        dim,
        classes: 2,
        separation: 1.0,
        label_noise: 0.0,
    };
    let means = class_means(&spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dup"));
    let mut pts = sample_gaussians(&spec, &means, n, &mut rng);
    for p in pts.iter_mut() {
        let m = &means[p.y];
        p.x.iter_mut().zip(m).for_each(|(x, c)| *x = c + DUP_SPREAD * (*x - c));
    }
    let y = pts[0].y;
    let d: Vec<f64> = (0..dim).map(|j| means[1 - y][j] - means[y][j]).collect();
    // Unit direction orthogonal to the class axis; empty in one dimension.
    let mut side: Vec<f64> = (0..dim).map(|j| if j == 0 { 0.0 } else { 1.0 }).collect();
    let proj = dot(&side, &d) / dot(&d, &d);
    side.iter_mut().zip(&d).for_each(|(s, di)| *s -= proj * di);
    let norm = dot(&side, &side).sqrt();
    side.iter_mut().for_each(|s| *s = if norm > 0.0 { *s / norm } else { 0.0 });
    pts[0].x = (0..dim)
        .map(|j| 0.5 * (means[0][j] + means[1][j]) + DUP_ACROSS * d[j] + DUP_LATERAL * side[j])
        .collect();
    let test_point = DataPoint::new(0, pts[0].x.clone(), y);
    if mislabeled {
        pts[0].y = 1 - pts[0].y;
    }
    Ok(DuplicateFixture {
        train: Dataset::new(pts, dim, 2, Role::Train)?,
        test_point,
        duplicate_id: 0,
    })
}

/// Two-subpopulation bias fixture. In the majority group a spurious feature
/// agrees with the label; in the minority group it disagrees. A model fit on
/// the skewed training mixture leans on the spurious feature and fails on the
/// minority group, which makes up the validation and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_augmentation: usize,
    pub dim: usize,
    /// Share of minority points in the training set.
    pub minority_fraction: f64,
    pub signal: f64,
    pub spurious: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_validation: 100,
            n_test: 200,
            n_augmentation: 400,
            dim: 4,
            minority_fraction: 0.05,
            signal: 1.0,
            spurious: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiasFixture {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Unseen pool with an even group mix.
    pub augmentation: Dataset,
    /// `true` for minority-group training points, indexed by id.
    pub train_minority: Vec<bool>,
}

fn bias_point(spec: &BiasSpec, id: usize, minority: bool, rng: &mut ChaCha8Rng) -> DataPoint {
    let y = rng.random_range(0..2usize);
    let s = if y == 1 { 1.0 } else { -1.0 };
    let mut x = gaussian_vec(rng, spec.dim);
    x[0] += s * spec.signal;
    if spec.dim > 1 {
        x[1] = 0.5 * x[1] + if minority { -s } else { s } * spec.spurious;
    }
    DataPoint::new(id, x, y)
}

pub fn bias(spec: &BiasSpec, seed: u64) -> Result<BiasFixture> {
    if spec.dim < 2 {
        return Err(Error::Config("bias fixture needs dim >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bias-train"));
    let mut train_minority = Vec::with_capacity(spec.n_train);
    let n_minor = (spec.n_train as f64 * spec.minority_fraction).round() as usize;
    let train: Vec<DataPoint> = (0..spec.n_train)
        .map(|i| {
            // Spread minority points evenly through the ids.
            let minority = n_minor > 0 && (i * n_minor) / spec.n_train != ((i + 1) * n_minor) / spec.n_train;
            train_minority.push(minority);
            bias_point(spec, i, minority, &mut rng)
        })
        .collect();
    let sample = |tag: &str, n: usize, minority_share: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        (0..n)
            .map(|i| {
                let minority = rng.random::<f64>() < minority_share;
                bias_point(spec, i, minority, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let validation = sample("bias-validation", spec.n_validation, 1.0);
    let test = sample("bias-test", spec.n_test, 1.0);
    let augmentation = sample("bias-augmentation", spec.n_augmentation, 0.5);
    Ok(BiasFixture {
        train: Dataset::new(train, spec.dim, 2, Role::Train)?,
        validation: Dataset::new(validation, spec.dim, 2, Role::Validation)?,
        test: Dataset::new(test, spec.dim, 2, Role::Test)?,
        augmentation: Dataset::new(augmentation, spec.dim, 2, Role::Augmentation)?,
        train_minority,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        let spec = GaussianSpec {
            n: 30,
            dim: 3,
            classes: 3,
            separation: 3.0,
            label_noise: 0.1,
        };
        let (a, _) = gaussians(&spec, 5, 7).unwrap();
        let (b, _) = gaussians(&spec, 5, 7).unwrap();
        let (c, _) = gaussians(&spec, 5, 8).unwrap();
        assert_eq!(a.points(), b.points());
        assert_ne!(a.points(), c.points());
    }

    #[test]
    fn duplicate_fixture_copies_test_point() {
        let f = duplicate_point(20, 3, false, 1).unwrap();
        assert_eq!(f.train.points()[0].x, f.test_point.x);
        assert_eq!(f.train.points()[0].y, f.test_point.y);
        let m = duplicate_point(20, 3, true, 1).unwrap();
        assert_ne!(m.train.points()[0].y, m.test_point.y);
    }

    #[test]
    fn bias_fixture_minority_share() {
        let f = bias(&BiasSpec::default(), 3).unwrap();
        let minor = f.train_minority.iter().filter(|m| **m).count();
        assert_eq!(minor, 20);
        assert_eq!(f.validation.role(), Role::Validation);
    }
}

