//! Pretraining corpus: generation with optimum-uniformity rejection and the
//! `FIBC` binary file format.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{find_optimum, sample_dataset, sample_function, PriorHyperparams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

pub const CORPUS_MAGIC: &[u8; 4] = b"FIBC";
pub const CORPUS_VERSION: u32 = 1;

/// A maximizer location and a context dataset drawn from the same function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub x_star: Vec<f64>,
    pub y_star: f64,
    pub data: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub pairs: Vec<TrainingPair>,
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub count: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub restarts: usize,
    pub bins_per_dim: usize,
    /// Upper bound on function draws before giving up on the quotas.
    pub max_draws: usize,
    pub workers: usize,
}

impl CorpusConfig {
    pub fn new(dim: usize, count: usize) -> Self {
        Self {
            count,
            n_min: 8,
            n_max: 100,
            restarts: super::default_restarts(dim),
            bins_per_dim: 4,
            max_draws: count.saturating_mul(200).max(1000),
            workers: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("count must be at least 1".into()));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::InvalidArgument(format!("need 1 <= n_min <= n_max, got {}..{}", self.n_min, self.n_max)));
        }
        if self.restarts == 0 || self.bins_per_dim == 0 {
            return Err(Error::InvalidArgument("restarts and bins must be positive".into()));
        }
        Ok(())
    }
}

/// Generated corpus plus rejection statistics.
#[derive(Clone, Debug)]
pub struct CorpusReport {
    pub corpus: Corpus,
    pub fills: Vec<usize>,
    pub quota: usize,
    pub draws: usize,
}

/// Flat bin index of `x` on a `bins^d` grid over the unit cube.
pub fn bin_index(x: &[f64], bins: usize) -> usize {
    x.iter().fold(0, |acc, &v| {
        let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        acc * bins + b
    })
}

/// One candidate: draw a function, locate its maximizer, sample a dataset.
/// The dataset comes from its own stream so that `x*` does not depend on it.
/// Returns `None` when a context value beats the ascent result, which would
/// mean the ascent missed the global maximum.
fn draw_candidate(hp: &PriorHyperparams, cfg: &CorpusConfig, seed: u64) -> Result<Option<TrainingPair>> {
    let mut frng = rng::child(seed, 0);
    let mut drng = rng::child(seed, 1);
    let f = sample_function(hp, &mut frng)?;
    let opt = find_optimum(&f, cfg.restarts, &mut frng)?;
    let n = drng.random_range(cfg.n_min..=cfg.n_max);
    let data = sample_dataset(&f, n, &mut drng)?;
    if data.best_value().is_some_and(|b| b > opt.value) {
        return Ok(None);
    }
    Ok(Some(TrainingPair { x_star: opt.x, y_star: opt.value, data }))
}

const CANDIDATE_BATCH: usize = 64;

fn draw_batch(hp: &PriorHyperparams, cfg: &CorpusConfig, seed: u64, first: usize) -> Result<Vec<Option<TrainingPair>>> {
    let run = |i: usize| draw_candidate(hp, cfg, rng::derive_seed(seed, i as u64));
    let range = first..first + CANDIDATE_BATCH;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        range.into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        range.map(run).collect()
    }
}

/// Generates `cfg.count` pairs whose optima are spread evenly over
/// `bins_per_dim^d` equal boxes. Candidates are drawn from independent
/// per-index streams of `seed` and accepted in index order, so the output
/// does not depend on the worker count.
pub fn generate_corpus(hp: &PriorHyperparams, cfg: &CorpusConfig, seed: u64) -> Result<CorpusReport> {
    hp.validate()?;
    cfg.validate()?;
    let nbins = cfg
        .bins_per_dim
        .checked_pow(hp.dim as u32)
        .ok_or_else(|| Error::InvalidArgument("too many bins".into()))?;
    let quota = cfg.count.div_ceil(nbins);
    let mut fills = vec![0usize; nbins];
    let mut pairs = Vec::with_capacity(cfg.count);
    let mut draws = 0;

    let mut generate = || -> Result<()> {
        while pairs.len() < cfg.count {
            if draws >= cfg.max_draws {
                return Err(Error::QuotaExhausted { draws, quota, fills: fills.clone() });
            }
            for pair in draw_batch(hp, cfg, seed, draws)? {
                if pairs.len() == cfg.count || draws >= cfg.max_draws {
                    break;
                }
                draws += 1;
                let Some(pair) = pair else { continue };
                let b = bin_index(&pair.x_star, cfg.bins_per_dim);
                if fills[b] < quota {
                    fills[b] += 1;
                    pairs.push(pair);
                }
            }
        }
        Ok(())
    };

    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(&mut generate)?;
    }
    #[cfg(not(feature = "parallel"))]
    generate()?;

    Ok(CorpusReport { corpus: Corpus { dim: hp.dim, pairs }, fills, quota, draws })
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated corpus: {e}")))?;
    Ok(buf)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn write_err(e: std::io::Error) -> Error {
    Error::Format(format!("write failed: {e}"))
}

impl Corpus {
    /// Little-endian `FIBC` encoding.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(write_err);
        put(CORPUS_MAGIC)?;
        put(&CORPUS_VERSION.to_le_bytes())?;
        put(&(self.dim as u32).to_le_bytes())?;
        put(&(self.pairs.len() as u64).to_le_bytes())?;
        for p in &self.pairs {
            for v in &p.x_star {
                put(&v.to_le_bytes())?;
            }
            put(&p.y_star.to_le_bytes())?;
            put(&(p.data.len() as u32).to_le_bytes())?;
            for (x, y) in p.data.iter() {
                for v in x {
                    put(&v.to_le_bytes())?;
                }
                put(&y.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != CORPUS_MAGIC {
            return Err(Error::Format("not a corpus file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != CORPUS_VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let dim = u32::from_le_bytes(read_exact(r)?) as usize;
        let count = u64::from_le_bytes(read_exact(r)?) as usize;
        if dim == 0 {
            return Err(Error::Format("corpus dimension 0".into()));
        }
        let mut pairs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let x_star = (0..dim).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let y_star = read_f64(r)?;
            let n = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut points = Vec::with_capacity(n);
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                points.push((0..dim).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?);
                values.push(read_f64(r)?);
            }
            pairs.push(TrainingPair { x_star, y_star, data: Dataset::new(points, values)? });
        }
        Ok(Self { dim, pairs })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    /// Writes the file atomically (temporary sibling, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// JSON-lines mirror of the binary format: a header line, then one
    /// record per pair.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::json!({
            "magic": "FIBC",
            "version": CORPUS_VERSION,
            "dim": self.dim,
            "count": self.pairs.len(),
        });
        writeln!(w, "{header}").map_err(write_err)?;
        for p in &self.pairs {
            let rec = serde_json::json!({
                "x_star": p.x_star,
                "y_star": p.y_star,
                "n": p.data.len(),
                "points": p.data.points(),
                "values": p.data.values(),
            });
            writeln!(w, "{rec}").map_err(write_err)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| Error::Format(e.to_string()))?)?,
            None => return Err(Error::Format("empty JSON-lines corpus".into())),
        };
        let dim = header["dim"].as_u64().ok_or_else(|| Error::Format("header lacks dim".into()))? as usize;
        #[derive(Deserialize)]
        struct Rec {
            x_star: Vec<f64>,
            y_star: f64,
            points: Vec<Vec<f64>>,
            values: Vec<f64>,
        }
        let mut pairs = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Rec = serde_json::from_str(&line)?;
            pairs.push(TrainingPair { x_star: rec.x_star, y_star: rec.y_star, data: Dataset::new(rec.points, rec.values)? });
        }
        Ok(Self { dim, pairs })
    }
}
