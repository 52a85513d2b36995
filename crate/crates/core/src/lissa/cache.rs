//! s_test cache keyed by [`ConfigHash`], in memory and optionally on disk.
//!
//! Because the hash covers the parameters as well as the query vector, a
//! change of parameters simply misses the cache.
//!
//! File layout: `FIFS` frame of the values, the 32 hash bytes, then
//! `u32` repetition count followed by `u64` iterations and `u8` convergence
//! flag per repetition.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{ConfigHash, STestVector};
use crate::binio::{read_frame, read_u32, read_u64, write_frame, write_u32, write_u64};
use crate::error::{Error, Result};
use crate::model::GradVector;

pub const STEST_MAGIC: &[u8; 4] = b"FIFS";

impl STestVector {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_frame(w, STEST_MAGIC, &self.values.values)?;
        w.write_all(&self.config_hash.0)?;
        write_u32(w, self.iterations_used.len() as u32)?;
        for (&it, &c) in self.iterations_used.iter().zip(&self.converged) {
            write_u64(w, it as u64)?;
            w.write_all(&[c as u8])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let values = read_frame(r, STEST_MAGIC)?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let t = read_u32(r)? as usize;
        let mut iterations_used = Vec::with_capacity(t.min(1 << 16));
        let mut converged = Vec::with_capacity(t.min(1 << 16));
        for _ in 0..t {
            iterations_used.push(read_u64(r)? as usize);
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            converged.push(match flag[0] {
                0 => false,
                1 => true,
                other => return Err(Error::Format(format!("bad convergence flag {other}"))),
            });
        }
        let values = GradVector::new(values);
        values.check_finite("cached s_test")?;
        Ok(Self {
            values,
            config_hash: ConfigHash(hash),
            iterations_used,
            converged,
        })
    }
}

/// Thread-safe s_test store. With a directory, entries are also written to
/// `<dir>/<hash>.stest` and looked up there on a memory miss.
#[derive(Debug, Default)]
pub struct STestCache {
    dir: Option<PathBuf>,
    entries: Mutex<HashMap<ConfigHash, STestVector>>,
}

impl STestCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            entries: Mutex::default(),
        })
    }

    /// Uses `FASTINF_CACHE_DIR` when set, memory only otherwise.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os("FASTINF_CACHE_DIR") {
            Some(d) if !d.is_empty() => Self::with_dir(PathBuf::from(d).join("stest")),
            _ => Ok(Self::in_memory()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &ConfigHash) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.stest")))
    }

    pub fn get(&self, key: &ConfigHash) -> Result<Option<STestVector>> {
        if let Some(hit) = self.entries.lock().expect("cache lock").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.path_for(key) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let s = STestVector::read_from(&mut BufReader::new(fs::File::open(&path)?))?;
        if s.config_hash != *key {
            return Err(Error::Format(format!("{} holds a different hash", path.display())));
        }
        self.entries.lock().expect("cache lock").insert(*key, s.clone());
        Ok(Some(s))
    }

    pub fn insert(&self, s: STestVector) -> Result<()> {
        if let Some(path) = self.path_for(&s.config_hash) {
            let tmp = path.with_extension("stest.tmp");
            {
                let mut w = BufWriter::new(fs::File::create(&tmp)?);
                s.write_to(&mut w)?;
                w.flush()?;
            }
            fs::rename(&tmp, &path)?;
        }
        self.entries.lock().expect("cache lock").insert(s.config_hash, s);
        Ok(())
    }

    /// Returns the cached entry for `key` or computes and stores it.
    pub fn get_or_insert_with(&self, key: ConfigHash, compute: impl FnOnce() -> Result<STestVector>) -> Result<STestVector> {
        if let Some(hit) = self.get(&key)? {
            return Ok(hit);
        }
        let s = compute()?;
        self.insert(s.clone())?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
