//! Bipartite influence graph between training and test points, and the
//! per-slice statistics computed from it.
//!
//! For a test slice `j` and training point `i`, `Ī[i, j]` is the mean signed
//! influence of `i` over the test points of `j` it has an edge to. Slice
//! correlations compare `Ī[·, a]` and `Ī[·, b]` over training points that
//! have edges into both slices.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::InfluenceRecord;
use crate::error::{Error, Result};
use crate::eval::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub slice: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub train: usize,
    pub test: usize,
    pub value: f64,
}

/// `{nodes: [{id, kind, slice}], edges: [{train, test, value}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl InfluenceGraph {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))
    }

    /// `(train, test, value)` per edge, in file order.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        self.edges.iter().map(|e| (e.train, e.test, e.value)).collect()
    }

    fn slices_of(&self, kind: NodeKind) -> BTreeMap<usize, &str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == kind)
            .map(|n| (n.id, n.slice.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub slice: String,
    pub test_points: usize,
    pub helpful_edges: usize,
    pub harmful_edges: usize,
    /// Mean `|I|` over negative edges; NaN when there are none.
    pub mean_abs_helpful: f64,
    /// Mean `|I|` over positive edges; NaN when there are none.
    pub mean_abs_harmful: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceCorrelation {
    pub a: String,
    pub b: String,
    /// Training points with edges into both slices.
    pub shared: usize,
    /// Pearson of `Ī[·, a]` and `Ī[·, b]`; `None` with fewer than two shared
    /// points or zero variance.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub slices: Vec<SliceStats>,
    pub correlations: Vec<SliceCorrelation>,
}

impl GraphStats {
    /// `slice,test_points,helpful_edges,harmful_edges,mean_abs_helpful,mean_abs_harmful,mean_abs`.
    pub fn write_slices_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "slice,test_points,helpful_edges,harmful_edges,mean_abs_helpful,mean_abs_harmful,mean_abs")?;
        for s in &self.slices {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.slice, s.test_points, s.helpful_edges, s.harmful_edges, s.mean_abs_helpful, s.mean_abs_harmful, s.mean_abs
            )?;
        }
        Ok(())
    }

    /// `a,b,shared,pearson`; `pearson` is empty when undefined.
    pub fn write_correlations_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "a,b,shared,pearson")?;
        for c in &self.correlations {
            match c.pearson {
                Some(p) => writeln!(w, "{},{},{},{}", c.a, c.b, c.shared, p)?,
                None => writeln!(w, "{},{},{},", c.a, c.b, c.shared)?,
            }
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Builds the graph. Every record's test id needs a slice label; training
/// points without one are tagged `"train"`.
pub fn export_influence_graph(
    records: &[InfluenceRecord],
    test_slices: &BTreeMap<usize, String>,
    train_slices: &BTreeMap<usize, String>,
) -> Result<InfluenceGraph> {
    if records.is_empty() {
        return Err(Error::config("graph export needs at least one record"));
    }
    let mut train_ids = BTreeSet::new();
    let mut test_ids = BTreeSet::new();
    for r in records {
        if !r.value.is_finite() {
            return Err(Error::numeric(format!("influence {} -> {} is not finite", r.train_id, r.test_id)));
        }
        if !test_slices.contains_key(&r.test_id) {
            return Err(Error::config(format!("test id {} has no slice label", r.test_id)));
        }
        train_ids.insert(r.train_id);
        test_ids.insert(r.test_id);
    }
    let mut nodes: Vec<GraphNode> = train_ids
        .into_iter()
        .map(|id| GraphNode {
            id,
            kind: NodeKind::Train,
            slice: train_slices.get(&id).cloned().unwrap_or_else(|| "train".into()),
        })
        .collect();
    nodes.extend(test_ids.into_iter().map(|id| GraphNode {
        id,
        kind: NodeKind::Test,
        slice: test_slices[&id].clone(),
    }));
    let edges = records
        .iter()
        .map(|r| GraphEdge {
            train: r.train_id,
            test: r.test_id,
            value: r.value,
        })
        .collect();
    Ok(InfluenceGraph { nodes, edges })
}

/// Per test slice: edge counts and mean `|I|` by sign, then pairwise slice
/// correlations of `Ī` over shared training support. Zero-valued edges
/// count toward `mean_abs` only.
pub fn slice_statistics(graph: &InfluenceGraph) -> Result<GraphStats> {
    let test_slice = graph.slices_of(NodeKind::Test);
    let mut by_slice: BTreeMap<&str, Vec<&GraphEdge>> = BTreeMap::new();
    for e in &graph.edges {
        let s = test_slice
            .get(&e.test)
            .ok_or_else(|| Error::Format(format!("edge to unknown test node {}", e.test)))?;
        by_slice.entry(s).or_default().push(e);
    }
    let mut slices = Vec::new();
    let mut mean_influence: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
    for (&name, edges) in &by_slice {
        let helpful: Vec<f64> = edges.iter().filter(|e| e.value < 0.0).map(|e| -e.value).collect();
        let harmful: Vec<f64> = edges.iter().filter(|e| e.value > 0.0).map(|e| e.value).collect();
        let all: Vec<f64> = edges.iter().map(|e| e.value.abs()).collect();
        slices.push(SliceStats {
            slice: name.to_string(),
            test_points: test_slice.values().filter(|s| **s == name).count(),
            helpful_edges: helpful.len(),
            harmful_edges: harmful.len(),
            mean_abs_helpful: mean(&helpful),
            mean_abs_harmful: mean(&harmful),
            mean_abs: mean(&all),
        });
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for e in edges {
            let s = sums.entry(e.train).or_insert((0.0, 0));
            s.0 += e.value;
            s.1 += 1;
        }
        mean_influence.insert(name, sums.into_iter().map(|(id, (t, c))| (id, t / c as f64)).collect());
    }
    let names: Vec<&str> = mean_influence.keys().copied().collect();
    let mut correlations = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ma, mb) = (&mean_influence[a], &mean_influence[b]);
            let (xs, ys): (Vec<f64>, Vec<f64>) = ma.iter().filter_map(|(id, x)| mb.get(id).map(|y| (*x, *y))).unzip();
            correlations.push(SliceCorrelation {
                a: a.to_string(),
                b: b.to_string(),
                shared: xs.len(),
                pearson: pearson(&xs, &ys).ok(),
            });
        }
    }
    Ok(GraphStats { slices, correlations })
}
