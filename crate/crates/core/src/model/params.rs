use std::io::{Read, Write};
use std::sync::Arc;

use crate::binio;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"FIFP";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered segment descriptors mapping slices of the flat parameter vector
/// to model components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    /// Segments must tile `0..P` contiguously in order.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::Format(format!(
                    "segment `{}` starts at {} but previous segment ended at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len;
        }
        Ok(Self {
            segments,
            total: next,
        })
    }

    pub(crate) fn from_sizes<I: IntoIterator<Item = (String, usize)>>(parts: I) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, len) in parts {
            segments.push(Segment { name, offset, len });
            offset += len;
        }
        Self {
            segments,
            total: offset,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat model parameters θ with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::config(format!(
                "parameter vector has {} values but layout covers {}",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// `self + alpha·dir`, validated.
    pub fn axpy(&self, alpha: f64, dir: &[f64]) -> Result<Self> {
        if dir.len() != self.len() {
            return Err(Error::config("direction length does not match parameters"));
        }
        let values = self
            .values
            .iter()
            .zip(dir)
            .map(|(p, d)| p + alpha * d)
            .collect();
        Self::new(values, self.layout.clone())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_frame(w, PARAMS_MAGIC, &self.values)?;
        binio::write_u32(w, self.layout.segments.len() as u32)?;
        for s in &self.layout.segments {
            binio::write_str(w, &s.name)?;
            binio::write_u64(w, s.offset as u64)?;
            binio::write_u64(w, s.len as u64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let values = binio::read_frame(r, PARAMS_MAGIC)?;
        let n = binio::read_u32(r)? as usize;
        let mut segments = Vec::with_capacity(n);
        for _ in 0..n {
            let name = binio::read_str(r)?;
            let offset = binio::read_u64(r)? as usize;
            let len = binio::read_u64(r)? as usize;
            segments.push(Segment { name, offset, len });
        }
        let layout = Layout::new(segments)?;
        Self::new(values, Arc::new(layout))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// A vector in parameter space: gradients, HVP results, inverse-HVP estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn scaled(&self, alpha: f64) -> GradVector {
        GradVector::new(self.values.iter().map(|v| v * alpha).collect())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::numeric(format!("{what}: coordinate {i} is not finite"))),
            None => Ok(()),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_header() {
        let layout = Arc::new(Layout::from_sizes([("w".to_string(), 2), ("b".to_string(), 1)]));
        let p = ParamVector::new(vec![1.5, -2.0, 0.25], layout).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FIFP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 1.5);
        let back = ParamVector::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.segment_values("b"), Some(&[0.25][..]));
    }

    #[test]
    fn layout_must_tile() {
        let bad = vec![
            Segment { name: "a".into(), offset: 0, len: 2 },
            Segment { name: "b".into(), offset: 3, len: 1 },
        ];
        assert!(Layout::new(bad).is_err());
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let layout = Arc::new(Layout::from_sizes([("w".to_string(), 2)]));
        assert!(ParamVector::new(vec![1.0], layout.clone()).is_err());
        assert!(ParamVector::new(vec![1.0, f64::NAN], layout).is_err());
    }
}
