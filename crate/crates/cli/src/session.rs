//! Ask-tell session state: a JSON file plus an advisory lock file in the
//! session directory.

use std::fs::{File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fibo::bench::DomainMap;
use fibo::Dataset;
use serde::{Deserialize, Serialize};

pub const STATE_FILE: &str = "session.json";
pub const LOCK_FILE: &str = "session.lock";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
}

/// Everything is stored in native coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub format_version: u32,
    pub experiment: String,
    pub dim: usize,
    pub domain: DomainMap,
    pub checkpoint: PathBuf,
    pub history: Vec<Observation>,
    /// Size of the first told batch, whose best value anchors GAP.
    pub initial_count: Option<usize>,
    pub pending: Option<Pending>,
}

impl Session {
    pub fn new(experiment: String, domain: DomainMap, checkpoint: PathBuf) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            experiment,
            dim: domain.dim(),
            domain,
            checkpoint,
            history: Vec::new(),
            initial_count: None,
            pending: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: Session = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if s.format_version != FORMAT_VERSION {
            bail!("{}: unsupported session format {}", path.display(), s.format_version);
        }
        if s.dim != s.domain.dim() {
            bail!("{}: dimension {} disagrees with the domain", path.display(), s.dim);
        }
        Ok(Some(s))
    }

    /// Temp-file-then-rename, so a crash leaves either the old or the new
    /// state on disk.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fibo::io::write_atomic(&dir.join(STATE_FILE), text.as_bytes())?;
        Ok(())
    }

    /// History mapped to the unit cube.
    pub fn unit_history(&self) -> Result<Dataset> {
        let mut data = Dataset::default();
        for o in &self.history {
            data.push(self.domain.to_unit(&o.x)?, o.y);
        }
        Ok(data)
    }

    pub fn best(&self) -> Option<&Observation> {
        self.history.iter().max_by(|a, b| a.y.total_cmp(&b.y))
    }

    pub fn initial_best(&self) -> Option<f64> {
        let n = self.initial_count?;
        self.history[..n].iter().map(|o| o.y).reduce(f64::max)
    }
}

/// Exclusive advisory lock held for the lifetime of the value.
pub struct SessionLock {
    _file: File,
}

impl SessionLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(TryLockError::WouldBlock) => Err(anyhow!("session {} is in use by another process", dir.display())),
            Err(TryLockError::Error(e)) => Err(e).with_context(|| format!("locking {}", path.display())),
        }
    }
}
