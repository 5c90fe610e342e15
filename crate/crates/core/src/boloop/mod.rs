//! Batch Thompson-sampling loop: suggesters, the run driver, and the GAP
//! metric.

mod gp_ts;
mod trace;

#[cfg(test)]
mod tests;

use rand::Rng as _;
use web_time::Instant;

pub use gp_ts::{gp_ts_suggest, BlrPosterior, GpTs};
pub use trace::{IterationRecord, RunTrace, TraceHeader, TraceLine};

use crate::data::{in_unit_cube, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, Rng};

/// A black-box function on the unit cube, larger is better.
pub trait Objective: Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn eval_unit(&self, x: &[f64]) -> Result<f64>;
}

/// Closure-backed objective.
pub struct FnObjective<F> {
    pub id: String,
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_unit(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }
}

/// Proposes a batch of `q` unit-cube points given the history.
pub trait Suggester {
    fn method(&self) -> &str;
    fn suggest(&self, data: &Dataset, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>>;
}

/// `q` i.i.d. uniform points on `[0,1]^d`.
pub fn random_suggest(d: usize, q: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..q).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

/// Encodes `data` once and pushes `q` latent draws through the flow.
pub fn fibo_suggest(model: &Model, data: &Dataset, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), got: data.dim() });
    }
    model.posterior(data)?.sample(q, rng)
}

pub struct RandomSearch {
    pub dim: usize,
}

impl Suggester for RandomSearch {
    fn method(&self) -> &str {
        "random"
    }

    fn suggest(&self, data: &Dataset, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if !data.is_empty() && data.dim() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: data.dim() });
        }
        Ok(random_suggest(self.dim, q, rng))
    }
}

pub struct Fibo<'a> {
    pub model: &'a Model,
}

impl Suggester for Fibo<'_> {
    fn method(&self) -> &str {
        "fibo"
    }

    fn suggest(&self, data: &Dataset, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        fibo_suggest(self.model, data, q, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub q: usize,
    pub total_evals: usize,
    pub seed: u64,
    /// When off, suggestion times are written as zero so traces are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl RunConfig {
    pub fn new(q: usize, total_evals: usize, seed: u64) -> Self {
        Self { q, total_evals, seed, record_timing: true }
    }

    /// Iterations after the initial design.
    pub fn iterations(&self) -> Result<usize> {
        if self.q == 0 || self.total_evals < self.q || !(self.total_evals - self.q).is_multiple_of(self.q) {
            return Err(Error::InvalidArgument(format!(
                "{} evaluations do not split into an initial batch plus full batches of {}",
                self.total_evals, self.q
            )));
        }
        Ok((self.total_evals - self.q) / self.q)
    }
}

fn evaluate(objective: &dyn Objective, points: &[Vec<f64>]) -> std::result::Result<Vec<f64>, String> {
    points
        .iter()
        .map(|x| {
            if !in_unit_cube(x) {
                return Err(format!("refused to evaluate outside the unit cube at {x:?}"));
            }
            match objective.eval_unit(x) {
                Ok(y) if y.is_finite() => Ok(y),
                Ok(y) => Err(format!("objective returned {y} at {x:?}")),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect()
}

/// Runs an initial uniform batch followed by `T` suggested batches. A
/// non-finite objective value ends the run with the error stored in the
/// trace; suggester failures are returned as errors.
pub fn run_bo(objective: &dyn Objective, suggester: &dyn Suggester, config: &RunConfig) -> Result<RunTrace> {
    let iterations = config.iterations()?;
    let d = objective.dim();
    let q = config.q;
    let mut trace = RunTrace::new(TraceHeader {
        objective: objective.id().to_string(),
        method: suggester.method().to_string(),
        dim: d,
        seed: config.seed,
        q,
        iterations,
        initial_count: q,
        total_evals: config.total_evals,
    });
    let mut data = Dataset::default();
    let mut best = f64::NEG_INFINITY;
    for t in 0..=iterations {
        let mut rng = rng::child(config.seed, t as u64);
        let (points, seconds) = if t == 0 {
            (random_suggest(d, q, &mut rng), 0.0)
        } else {
            let start = Instant::now();
            let points = suggester.suggest(&data, q, &mut rng)?;
            let elapsed = start.elapsed().as_secs_f64();
            (points, if config.record_timing { elapsed } else { 0.0 })
        };
        if points.len() != q || points.iter().any(|p| p.len() != d) {
            return Err(Error::InvalidArgument(format!("{} returned a malformed batch", suggester.method())));
        }
        let values = match evaluate(objective, &points) {
            Ok(v) => v,
            Err(message) => {
                trace.error = Some(format!("iteration {t}: {message}"));
                return Ok(trace);
            }
        };
        for (x, &y) in points.iter().zip(&values) {
            data.push(x.clone(), y);
            best = best.max(y);
        }
        trace.records.push(IterationRecord { iteration: t, points, values, best, suggest_seconds: seconds });
    }
    Ok(trace)
}

/// Normalized progress `(y_i - y_0) / (y* - y_0)` clipped to `[0,1]`.
pub fn gap_value(y0: f64, yi: f64, y_star: f64) -> Result<f64> {
    if !(y0.is_finite() && yi.is_finite() && y_star.is_finite()) {
        return Err(Error::InvalidArgument("GAP needs finite values".into()));
    }
    if y_star < y0 {
        return Err(Error::DegenerateGap { y0, y_star });
    }
    if y_star == y0 {
        return Ok(if yi >= y_star { 1.0 } else { 0.0 });
    }
    Ok(((yi - y0) / (y_star - y0)).clamp(0.0, 1.0))
}

/// Per-evaluation GAP of a trace's running best.
#[derive(Clone, Debug, PartialEq)]
pub struct GapSeries {
    pub values: Vec<f64>,
}

impl GapSeries {
    pub fn final_gap(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// GAP for every evaluation in `trace`, with `y_0` the best value of the
/// initial design.
pub fn gap(trace: &RunTrace, y_star: f64) -> Result<GapSeries> {
    let y0 = trace.initial_best().ok_or_else(|| Error::InvalidArgument("trace has no initial design".into()))?;
    let values = trace.running_best().into_iter().map(|b| gap_value(y0, b, y_star)).collect::<Result<_>>()?;
    Ok(GapSeries { values })
}
