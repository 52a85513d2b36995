//! Hierarchical navigable small-world graph over the slots of a
//! [`FeatureIndex`]. Construction is sequential and seeded, so the same input
//! always yields the same graph.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sq_dist, FeatureIndex};

/// `(distance, slot)` ordered by distance then slot.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Graph {
    /// `links[slot][layer]`, present for layers `0..=level(slot)`.
    links: Vec<Vec<Vec<usize>>>,
    entry: usize,
    top: usize,
    m: usize,
    ef: usize,
}

impl Graph {
    pub fn build(index: &FeatureIndex, m: usize, ef: usize, seed: u64) -> Self {
        let n = index.len();
        let ml = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph {
            links: Vec::with_capacity(n),
            entry: 0,
            top: 0,
            m,
            ef,
        };
        for slot in 0..n {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = (-u.ln() * ml).floor() as usize;
            g.links.push(vec![Vec::new(); level + 1]);
            if slot == 0 {
                g.top = level;
                continue;
            }
            g.insert(index, slot, level);
        }
        g
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    fn insert(&mut self, index: &FeatureIndex, slot: usize, level: usize) {
        let q = index.vector(slot);
        let mut ep = vec![Cand(sq_dist(q, index.vector(self.entry)), self.entry)];
        for layer in (level + 1..=self.top).rev() {
            ep = self.search_layer(index, q, &ep, 1, layer);
        }
        for layer in (0..=level.min(self.top)).rev() {
            let found = self.search_layer(index, q, &ep, self.ef, layer);
            let chosen = select_neighbors(index, &found, self.max_links(layer));
            for &Cand(_, other) in &chosen {
                self.links[slot][layer].push(other);
                self.links[other][layer].push(slot);
                if self.links[other][layer].len() > self.max_links(layer) {
                    self.shrink(index, other, layer);
                }
            }
            ep = found;
        }
        if level > self.top {
            self.top = level;
            self.entry = slot;
        }
    }

    fn shrink(&mut self, index: &FeatureIndex, slot: usize, layer: usize) {
        let base = index.vector(slot);
        let mut cands: Vec<Cand> = self.links[slot][layer]
            .iter()
            .map(|&o| Cand(sq_dist(base, index.vector(o)), o))
            .collect();
        cands.sort();
        let keep = select_neighbors(index, &cands, self.max_links(layer));
        self.links[slot][layer] = keep.into_iter().map(|c| c.1).collect();
    }

    /// Best-first search on one layer; returns up to `ef` candidates, ascending.
    fn search_layer(&self, index: &FeatureIndex, q: &[f64], ep: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited = vec![false; self.links.len()];
        let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &c in ep {
            if !visited[c.1] {
                visited[c.1] = true;
                frontier.push(Reverse(c));
                best.push(c);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            for &o in &self.links[c.1][layer] {
                if visited[o] {
                    continue;
                }
                visited[o] = true;
                let cand = Cand(sq_dist(q, index.vector(o)), o);
                if best.len() < ef || cand < *best.peek().expect("non-empty") {
                    frontier.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Up to `max(k, ef)` approximate neighbors as `(id, squared distance)`.
    pub fn search(&self, index: &FeatureIndex, q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut ep = vec![Cand(sq_dist(q, index.vector(self.entry)), self.entry)];
        for layer in (1..=self.top).rev() {
            ep = self.search_layer(index, q, &ep, 1, layer);
        }
        self.search_layer(index, q, &ep, self.ef.max(k), 0)
            .into_iter()
            .map(|Cand(d, s)| (index.id(s), d))
            .collect()
    }
}

/// Diversity heuristic: keep a candidate only if it is closer to the base
/// point than to every neighbor kept so far, then top up with the closest
/// rejected ones. `cands` must be ascending.
fn select_neighbors(index: &FeatureIndex, cands: &[Cand], m: usize) -> Vec<Cand> {
    let mut kept: Vec<Cand> = Vec::with_capacity(m);
    let mut rejected = Vec::new();
    for &c in cands {
        if kept.len() == m {
            break;
        }
        let v = index.vector(c.1);
        if kept.iter().all(|k| c.0 < sq_dist(v, index.vector(k.1))) {
            kept.push(c);
        } else {
            rejected.push(c);
        }
    }
    for c in rejected {
        if kept.len() == m {
            break;
        }
        kept.push(c);
    }
    kept
}
