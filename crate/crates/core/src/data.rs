//! Labeled examples and the tab-separated dataset file format.
//!
//! A dataset file starts with a header line `#d=<d> C=<C>` followed by one
//! record per line: `id <tab> label <tab> comma-separated floats`. Ids in a
//! file must be `0..N` in order.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub id: usize,
    pub x: Vec<f64>,
    pub y: usize,
}

impl DataPoint {
    pub fn new(id: usize, x: Vec<f64>, y: usize) -> Self {
        Self { id, x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
    Augmentation,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
            Role::Augmentation => "augmentation",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            "augmentation" => Ok(Role::Augmentation),
            other => Err(Error::config(format!("unknown dataset role `{other}`"))),
        }
    }
}

/// An immutable, non-empty collection of points sharing a feature dimension
/// and class count. Cloning is cheap; points are shared.
#[derive(Debug, Clone)]
pub struct Dataset {
    points: Arc<[DataPoint]>,
    dim: usize,
    classes: usize,
    role: Role,
}

impl Dataset {
    /// Validates that the set is non-empty, ids are unique, every `x` has
    /// length `dim` and every label is below `classes`.
    pub fn new(points: Vec<DataPoint>, dim: usize, classes: usize, role: Role) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("dataset must not be empty"));
        }
        if classes < 2 {
            return Err(Error::config("a dataset needs at least two classes"));
        }
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(p.id) {
                return Err(Error::config(format!("duplicate point id {}", p.id)));
            }
            if p.x.len() != dim {
                return Err(Error::config(format!(
                    "point {} has dimension {}, expected {dim}",
                    p.id,
                    p.x.len()
                )));
            }
            if p.y >= classes {
                return Err(Error::config(format!(
                    "point {} has label {} but C = {classes}",
                    p.id, p.y
                )));
            }
            if p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("point {} has a non-finite feature", p.id)));
            }
        }
        Ok(Self {
            points: points.into(),
            dim,
            classes,
            role,
        })
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn get(&self, id: usize) -> Option<&DataPoint> {
        // Fast path for the contiguous layout produced by loaders and generators.
        match self.points.get(id) {
            Some(p) if p.id == id => Some(p),
            _ => self.points.iter().find(|p| p.id == id),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.points.iter().map(|p| p.id)
    }

    /// A new dataset with the given ids removed. Ids of remaining points are kept.
    pub fn without(&self, remove: &[usize]) -> Result<Self> {
        let remove: HashSet<usize> = remove.iter().copied().collect();
        let kept: Vec<DataPoint> = self
            .points
            .iter()
            .filter(|p| !remove.contains(&p.id))
            .cloned()
            .collect();
        Self::new(kept, self.dim, self.classes, self.role)
    }

    /// A new dataset restricted to `ids`, in the order given.
    pub fn select(&self, ids: &[usize], role: Role) -> Result<Self> {
        let mut pts = Vec::with_capacity(ids.len());
        for &id in ids {
            let p = self
                .get(id)
                .ok_or_else(|| Error::config(format!("unknown point id {id}")))?;
            pts.push(p.clone());
        }
        Self::new(pts, self.dim, self.classes, role)
    }

    /// Same points with labels replaced by `labels[i]` for the i-th point.
    pub fn relabeled(&self, labels: &[usize], role: Role) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::config("label count does not match dataset size"));
        }
        let pts = self
            .points
            .iter()
            .zip(labels)
            .map(|(p, &y)| DataPoint::new(p.id, p.x.clone(), y))
            .collect();
        Self::new(pts, self.dim, self.classes, role)
    }

    /// Renumbers ids to `0..N` in current order.
    pub fn renumbered(&self) -> Result<Self> {
        let pts = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| DataPoint::new(i, p.x.clone(), p.y))
            .collect();
        Self::new(pts, self.dim, self.classes, self.role)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#d={} C={}", self.dim, self.classes)?;
        let mut line = String::new();
        for p in self.points.iter() {
            line.clear();
            line.push_str(&format!("{}\t{}\t", p.id, p.y));
            for (i, v) in p.x.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{v:?}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Parses the dataset format; errors carry 1-based line numbers.
    pub fn read_from<R: BufRead>(r: R, role: Role) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (dim, classes) = loop {
            let (idx, line) = lines.next().ok_or_else(|| Error::Parse {
                line: 1,
                message: "missing `#d=<d> C=<C>` header".into(),
            })?;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            break parse_header(&line).ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("malformed header `{line}`"),
            })?;
        };

        let mut points = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { line: lineno, message };
            let mut fields = line.split('\t');
            let id_s = fields.next().unwrap_or("");
            let label_s = fields.next().ok_or_else(|| perr("missing label field".into()))?;
            let feats_s = fields.next().ok_or_else(|| perr("missing feature field".into()))?;
            if fields.next().is_some() {
                return Err(perr("too many fields".into()));
            }
            let id: usize = id_s
                .trim()
                .parse()
                .map_err(|_| perr(format!("invalid id `{id_s}`")))?;
            if id != points.len() {
                return Err(perr(format!("expected id {}, found {id}", points.len())));
            }
            let y: usize = label_s
                .trim()
                .parse()
                .map_err(|_| perr(format!("invalid label `{label_s}`")))?;
            if y >= classes {
                return Err(perr(format!("label {y} out of range for C={classes}")));
            }
            let x: Vec<f64> = feats_s
                .split(',')
                .enumerate()
                .map(|(j, s)| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| perr(format!("feature {j}: invalid float `{s}`")))
                })
                .collect::<Result<_>>()?;
            if x.len() != dim {
                return Err(perr(format!("expected {dim} features, found {}", x.len())));
            }
            points.push(DataPoint::new(id, x, y));
        }
        Self::new(points, dim, classes, role)
    }

    pub fn load(path: &std::path::Path, role: Role) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), role)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.trim().strip_prefix('#')?;
    let mut dim = None;
    let mut classes = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=')?;
        match k {
            "d" => dim = Some(v.parse().ok()?),
            "C" => classes = Some(v.parse().ok()?),
            _ => return None,
        }
    }
    Some((dim?, classes?))
}
