//! Feature cache: `u64` record count, then per record a `u64` id followed by
//! a `FIFF` vector frame.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::model_features;
use crate::binio::{read_frame, read_u64, write_frame, write_u64};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};

pub const FEATURE_MAGIC: &[u8; 4] = b"FIFF";

pub fn write_features<W: Write>(w: &mut W, entries: &[(usize, Vec<f64>)]) -> Result<()> {
    write_u64(w, entries.len() as u64)?;
    for (id, v) in entries {
        write_u64(w, *id as u64)?;
        write_frame(w, FEATURE_MAGIC, v)?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<Vec<(usize, Vec<f64>)>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = read_u64(r)? as usize;
        out.push((id, read_frame(r, FEATURE_MAGIC)?));
    }
    Ok(out)
}

/// Hex digest over the model spec, the parameters and the dataset contents.
pub fn feature_cache_key(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    for x in params.values() {
        h.update(x.to_le_bytes());
    }
    for z in data.points() {
        h.update((z.id as u64).to_le_bytes());
        h.update((z.y as u64).to_le_bytes());
        for x in &z.x {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory of feature files named by [`feature_cache_key`].
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    dir: Option<PathBuf>,
}

impl FeatureCache {
    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir) })
    }

    /// `$FASTINF_CACHE_DIR/features` when the variable is set.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os("FASTINF_CACHE_DIR") {
            Some(d) if !d.is_empty() => Self::with_dir(PathBuf::from(d).join("features")),
            _ => Ok(Self::disabled()),
        }
    }

    /// Reads cached features or computes and stores them.
    pub fn load_or_compute(&self, spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Vec<(usize, Vec<f64>)>> {
        let Some(dir) = &self.dir else {
            return model_features(spec, params, data);
        };
        let path = dir.join(format!("{}.fiff", feature_cache_key(spec, params, data)));
        if path.exists() {
            let entries = read_features(&mut BufReader::new(fs::File::open(&path)?))?;
            if entries.len() != data.len() {
                return Err(Error::Format(format!("{} has {} records, expected {}", path.display(), entries.len(), data.len())));
            }
            return Ok(entries);
        }
        let entries = model_features(spec, params, data)?;
        let tmp = path.with_extension("fiff.tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            write_features(&mut w, &entries)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(entries)
    }
}
