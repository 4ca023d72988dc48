//! On-disk cache of reference optima, keyed by problem fingerprint and
//! protected by a content checksum.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ReferenceRun;
use crate::error::{Error, Result};
use crate::oracle::BilevelProblem;

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedOptimum {
    pub version: u32,
    pub problem: String,
    pub fingerprint: String,
    pub h_star: f64,
    pub x_star: Vec<f64>,
    pub grad_tol: f64,
    pub created_unix: u64,
    pub checksum: String,
}

impl CachedOptimum {
    pub fn new<P: BilevelProblem + ?Sized>(problem: &P, run: &ReferenceRun, grad_tol: f64) -> Self {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut entry = Self {
            version: CACHE_VERSION,
            problem: problem.name().to_string(),
            fingerprint: problem.fingerprint(),
            h_star: run.h_star,
            x_star: run.x_star.clone(),
            grad_tol,
            created_unix,
            checksum: String::new(),
        };
        entry.checksum = entry.content_checksum();
        entry
    }

    fn content_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.version.to_le_bytes());
        hasher.update(self.problem.as_bytes());
        hasher.update([0]);
        hasher.update(self.fingerprint.as_bytes());
        hasher.update(self.h_star.to_le_bytes());
        for v in &self.x_star {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.grad_tol.to_le_bytes());
        hasher.update(self.created_unix.to_le_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads an entry and checks it against `problem`; a version, checksum or
    /// fingerprint mismatch is a stale-cache error.
    pub fn load<P: BilevelProblem + ?Sized>(path: &Path, problem: &P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entry: Self = serde_json::from_str(&text)
            .map_err(|e| Error::StaleCache(format!("{}: unreadable cache entry: {e}", path.display())))?;
        if entry.version != CACHE_VERSION {
            return Err(Error::StaleCache(format!("cache version {} (expected {CACHE_VERSION})", entry.version)));
        }
        if entry.checksum != entry.content_checksum() {
            return Err(Error::StaleCache(format!("{}: checksum mismatch", path.display())));
        }
        if entry.fingerprint != problem.fingerprint() {
            return Err(Error::StaleCache(format!("{}: built for a different problem instance", path.display())));
        }
        Ok(entry)
    }
}
