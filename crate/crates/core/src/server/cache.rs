//! Optimized-matrix cache: one JSON file per configuration digest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::model::{validate_matrix, AllocationMatrix, ClusterSpec, MatrixDocument, SpecDocument};
use crate::optimizer::GreedyConfig;

/// Everything that determines the optimizer's output.
#[derive(Clone, Debug, Serialize)]
pub struct CacheKeyInputs<'a> {
    pub spec: SpecDocument,
    pub greedy: &'a GreedyConfig,
    pub default_batch: u32,
    /// Identifies the bench used to score matrices.
    pub scorer: &'a str,
}

impl<'a> CacheKeyInputs<'a> {
    pub fn new(cluster: &ClusterSpec, greedy: &'a GreedyConfig, default_batch: u32, scorer: &'a str) -> Self {
        Self {
            spec: cluster.to_document(),
            greedy,
            default_batch,
            scorer,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("key inputs serialize");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCacheEntry {
    pub key: String,
    pub matrix: MatrixDocument,
    pub score: f64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl MatrixCacheEntry {
    pub fn new(key: String, matrix: &AllocationMatrix, cluster: &ClusterSpec, score: f64) -> Self {
        Self {
            key,
            matrix: matrix.to_document(cluster),
            score,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

#[derive(Debug)]
pub enum Lookup {
    Hit(MatrixCacheEntry, AllocationMatrix),
    Miss,
    /// The file exists but cannot be used; `String` says why.
    Corrupt(String),
}

impl Lookup {
    pub fn hit(self) -> Option<(MatrixCacheEntry, AllocationMatrix)> {
        match self {
            Lookup::Hit(e, a) => Some((e, a)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatrixCache {
    dir: PathBuf,
}

impl MatrixCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Finds the entry for `key`. Unreadable, mismatched or invalid files
    /// are reported as [`Lookup::Corrupt`] and logged, never as errors.
    pub fn lookup(&self, key: &str, cluster: &ClusterSpec) -> Lookup {
        let path = self.path(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Lookup::Miss,
            Err(e) => return corrupt(&path, e.to_string()),
        };
        let entry: MatrixCacheEntry = match serde_json::from_str(&text) {
            Ok(e) => e,
            Err(e) => return corrupt(&path, e.to_string()),
        };
        if entry.key != key {
            return corrupt(&path, format!("stored key {} does not match", entry.key));
        }
        let matrix = match AllocationMatrix::from_document(&entry.matrix, cluster) {
            Ok(a) => a,
            Err(e) => return corrupt(&path, e.to_string()),
        };
        match validate_matrix(&matrix, cluster) {
            Ok(v) if v.is_ok() => Lookup::Hit(entry, matrix),
            Ok(v) => corrupt(&path, format!("{:?}", v.violations)),
            Err(e) => corrupt(&path, e.to_string()),
        }
    }

    /// Writes `entry` to a temporary file and renames it over the old one.
    pub fn store(&self, entry: &MatrixCacheEntry) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path(&entry.key);
        let tmp = self.dir.join(format!(".{}.{}.tmp", entry.key, std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(entry)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

fn corrupt(path: &Path, reason: String) -> Lookup {
    log::warn!("ignoring cache file {}: {reason}", path.display());
    Lookup::Corrupt(reason)
}
