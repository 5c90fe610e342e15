//! Experiment grid driver: every objective x method x batch size x seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::objectives::{BenchObjective, ObjectiveRecord};
use crate::boloop::{gap, run_bo, Fibo, GpTs, RandomSearch, RunConfig, RunTrace, Suggester};
use crate::error::{Error, Result};
use crate::funcprior::PriorHyperparams;
use crate::model::Model;
use crate::rng;
use crate::trainer::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fibo,
    GpTs,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fibo => "fibo",
            Method::GpTs => "gp_ts",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_PRIOR_SEED: u64 = 20_240_501;
const GP_FEATURE_STREAM: u64 = 0x6770_5f74_7300_0000;

fn default_total_evals() -> usize {
    200
}

fn default_prior_seed() -> u64 {
    DEFAULT_PRIOR_SEED
}

fn default_gp_noise() -> f64 {
    GpTs::DEFAULT_NOISE
}

fn yes() -> bool {
    true
}

/// Suite file contents. Checkpoints are keyed by dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub objectives: Vec<String>,
    pub methods: Vec<Method>,
    pub q: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_total_evals")]
    pub total_evals: usize,
    #[serde(default)]
    pub checkpoints: BTreeMap<usize, PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_prior_seed")]
    pub prior_seed: u64,
    #[serde(default = "default_gp_noise")]
    pub gp_noise: f64,
    /// Ascent restarts per GP-TS draw; dimension default when absent.
    #[serde(default)]
    pub gp_restarts: Option<usize>,
    #[serde(default = "yes")]
    pub record_timing: bool,
}

impl SuiteSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("suite spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("objectives", self.objectives.is_empty()),
            ("methods", self.methods.is_empty()),
            ("q", self.q.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidArgument(format!("suite lists no {name}")));
            }
        }
        for &q in &self.q {
            RunConfig::new(q, self.total_evals, 0).iterations()?;
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.objectives.len() * self.methods.len() * self.q.len() * self.seeds.len()
    }
}

/// File name of a cell's trace.
pub fn trace_file_name(objective: &str, method: Method, q: usize, seed: u64) -> String {
    format!("{objective}_{method}_q{q}_s{seed}.jsonl")
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub objective: String,
    pub method: Method,
    pub q: usize,
    pub seed: u64,
    pub path: PathBuf,
    /// A trace carrying an error was aborted by its objective; `Err` means
    /// the cell never produced a trace.
    pub result: std::result::Result<RunTrace, String>,
}

impl CellOutcome {
    pub fn failed(&self) -> bool {
        !matches!(&self.result, Ok(t) if t.is_complete())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task_set: String,
    pub objective: String,
    pub method: Method,
    pub q: usize,
    pub gap_mean: f64,
    pub gap_se: f64,
    pub time_mean: f64,
    pub time_se: f64,
    pub runs: usize,
}

pub const SUMMARY_HEADER: &str = "task-set,objective,method,q,gap-mean,gap-se,time-mean,time-se";

pub fn write_summary_csv(rows: &[SummaryRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.task_set, r.objective, r.method, r.q, r.gap_mean, r.gap_se, r.time_mean, r.time_se
        )?;
    }
    Ok(())
}

pub struct SuiteReport {
    pub cells: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
    /// Normalizing optimum per objective id.
    pub y_star: BTreeMap<String, f64>,
    /// Final GAP per completed cell, in cell order.
    pub final_gaps: Vec<Option<f64>>,
}

impl SuiteReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn load_models(spec: &SuiteSpec, objectives: &[BenchObjective]) -> Result<BTreeMap<usize, Model>> {
    if !spec.methods.contains(&Method::Fibo) {
        return Ok(BTreeMap::new());
    }
    let dims: BTreeSet<usize> = objectives.iter().map(|o| o.dim()).collect();
    let missing: Vec<usize> = dims
        .iter()
        .copied()
        .filter(|d| spec.checkpoints.get(d).is_none_or(|p| !p.is_file()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoint(missing));
    }
    dims.into_iter()
        .map(|d| {
            let model = Checkpoint::load(&spec.checkpoints[&d])?.model;
            if model.dim() != d {
                return Err(Error::Dimension { expected: d, got: model.dim() });
            }
            Ok((d, model))
        })
        .collect()
}

fn run_cell(
    spec: &SuiteSpec,
    obj: &BenchObjective,
    models: &BTreeMap<usize, Model>,
    method: Method,
    q: usize,
    seed: u64,
) -> CellOutcome {
    let path = spec.output_dir.join(trace_file_name(&obj.id, method, q, seed));
    let run = || -> Result<RunTrace> {
        let d = obj.dim();
        let gp;
        let fibo;
        let random = RandomSearch { dim: d };
        let suggester: &dyn Suggester = match method {
            Method::Random => &random,
            Method::Fibo => {
                fibo = Fibo { model: &models[&d] };
                &fibo
            }
            Method::GpTs => {
                let restarts = spec.gp_restarts.unwrap_or_else(|| GpTs::default_restarts(d));
                gp = GpTs::new(&PriorHyperparams::new(d), spec.gp_noise, restarts, &mut rng::child(seed, GP_FEATURE_STREAM))?;
                &gp
            }
        };
        let config = RunConfig { q, total_evals: spec.total_evals, seed, record_timing: spec.record_timing };
        let trace = run_bo(obj, suggester, &config)?;
        trace.save(&path)?;
        Ok(trace)
    };
    CellOutcome {
        objective: obj.id.clone(),
        method,
        q,
        seed,
        path: path.clone(),
        result: run().map_err(|e| e.to_string()),
    }
}

/// Runs every cell on `workers` threads, writing each trace as soon as it
/// finishes, then `summary.csv`. Per-cell failures are reported in the
/// result rather than aborting the suite.
pub fn run_suite(spec: &SuiteSpec, workers: usize) -> Result<SuiteReport> {
    spec.validate()?;
    let objectives = spec
        .objectives
        .iter()
        .map(|id| BenchObjective::from_id(id, spec.prior_seed))
        .collect::<Result<Vec<_>>>()?;
    let models = load_models(spec, &objectives)?;
    let out = &spec.output_dir;
    std::fs::create_dir_all(out.join("objectives")).map_err(|source| Error::Io { path: out.clone(), source })?;
    for obj in &objectives {
        if let Some(record) = ObjectiveRecord::of(obj) {
            let text = serde_json::to_vec_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
            crate::io::write_atomic(&out.join("objectives").join(format!("{}.json", obj.id)), &text)?;
        }
    }

    let mut grid = Vec::with_capacity(spec.cell_count());
    for obj in &objectives {
        for &method in &spec.methods {
            for &q in &spec.q {
                for &seed in &spec.seeds {
                    grid.push((obj, method, q, seed));
                }
            }
        }
    }
    let run = |&(obj, method, q, seed): &(&BenchObjective, Method, usize, u64)| run_cell(spec, obj, &models, method, q, seed);
    #[cfg(feature = "parallel")]
    let cells: Vec<CellOutcome> = {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| grid.par_iter().map(run).collect())
    };
    #[cfg(not(feature = "parallel"))]
    let cells: Vec<CellOutcome> = {
        let _ = workers;
        grid.iter().map(run).collect()
    };

    let mut y_star = BTreeMap::new();
    for obj in &objectives {
        let known = obj.optimum.as_ref().map_or(f64::NEG_INFINITY, |o| o.value);
        let observed = cells
            .iter()
            .filter(|c| c.objective == obj.id)
            .filter_map(|c| c.result.as_ref().ok().and_then(RunTrace::best))
            .fold(f64::NEG_INFINITY, f64::max);
        y_star.insert(obj.id.clone(), known.max(observed));
    }
    let final_gaps: Vec<Option<f64>> = cells
        .iter()
        .map(|c| match &c.result {
            Ok(t) if t.is_complete() => gap(t, y_star[&c.objective]).ok().map(|g| g.final_gap()),
            _ => None,
        })
        .collect();

    let mut summary = Vec::new();
    for obj in &objectives {
        for &method in &spec.methods {
            for &q in &spec.q {
                let mut gaps = Vec::new();
                let mut times = Vec::new();
                for (c, g) in cells.iter().zip(&final_gaps) {
                    if c.objective == obj.id && c.method == method && c.q == q {
                        if let (Ok(t), Some(g)) = (&c.result, g) {
                            gaps.push(*g);
                            times.push(t.mean_suggest_seconds());
                        }
                    }
                }
                let (gap_mean, gap_se) = mean_se(&gaps);
                let (time_mean, time_se) = mean_se(&times);
                summary.push(SummaryRow {
                    task_set: obj.task_set().to_string(),
                    objective: obj.id.clone(),
                    method,
                    q,
                    gap_mean,
                    gap_se,
                    time_mean,
                    time_se,
                    runs: gaps.len(),
                });
            }
        }
    }
    let mut csv = Vec::new();
    write_summary_csv(&summary, &mut csv).expect("writing to memory");
    crate::io::write_atomic(&out.join("summary.csv"), &csv)?;
    Ok(SuiteReport { cells, summary, y_star, final_gaps })
}
