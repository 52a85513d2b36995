//! Pearson, Spearman (average ranks for ties) and Kendall tau-b.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    pub n: usize,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::config(format!("sequences differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::config("correlation needs at least two pairs"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::numeric("correlation input is not finite"));
    }
    Ok(())
}

/// Moment-formula Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    // One square root keeps identical inputs at exactly 1.
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && a[order[end]] == a[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Pair counts behind tau-b: concordant, discordant, pairs tied only in
/// `a`, pairs tied only in `b`.
pub fn kendall_counts(a: &[f64], b: &[f64]) -> (u64, u64, u64, u64) {
    let (mut c, mut d, mut ta, mut tb) = (0, 0, 0, 0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i].total_cmp(&a[j]), b[i].total_cmp(&b[j])) {
                (Ordering::Equal, Ordering::Equal) => {}
                (Ordering::Equal, _) => ta += 1,
                (_, Ordering::Equal) => tb += 1,
                (x, y) if x == y => c += 1,
                _ => d += 1,
            }
        }
    }
    (c, d, ta, tb)
}

/// `(C - D) / sqrt((C + D + T_a)(C + D + T_b))`.
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (c, d, ta, tb) = kendall_counts(a, b);
    let denom = ((c + d + ta) as f64 * (c + d + tb) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::DegenerateInput("every pair is tied".into()));
    }
    Ok(((c as f64 - d as f64) / denom).clamp(-1.0, 1.0))
}

pub fn correlate(a: &[f64], b: &[f64]) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        pearson: pearson(a, b)?,
        spearman: spearman(a, b)?,
        kendall: kendall_tau_b(a, b)?,
        n: a.len(),
    })
}

/// Correlation over the ids present in both maps, paired by id.
pub fn correlate_shared(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> Result<CorrelationReport> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .iter()
        .filter_map(|(id, x)| b.get(id).map(|y| (*x, *y)))
        .unzip();
    correlate(&xs, &ys)
}
