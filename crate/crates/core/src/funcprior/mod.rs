//! Approximate GP prior over functions on the unit cube, maximizer search,
//! and generation of `(x*, D)` pretraining pairs.

mod corpus;
mod optimum;
mod rff;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use corpus::{bin_index, generate_corpus, Corpus, CorpusConfig, CorpusReport, TrainingPair, CORPUS_MAGIC, CORPUS_VERSION};
pub use optimum::{ascend, default_restarts, find_optimum, find_optimum_with, AscentConfig, FnSmooth, Optimum, Smooth};
pub use rff::{sample_function, sample_function_with, FunctionSample, RffFeatures};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Hyperprior for the RBF prior: per-dimension lengthscales and the signal
/// variance are drawn uniformly from these ranges for every function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorHyperparams {
    pub dim: usize,
    pub num_features: usize,
    pub lengthscale_range: (f64, f64),
    pub signal_variance_range: (f64, f64),
}

impl PriorHyperparams {
    pub const DEFAULT_NUM_FEATURES: usize = 256;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            num_features: Self::DEFAULT_NUM_FEATURES,
            lengthscale_range: (0.01, 5.0),
            signal_variance_range: (1.0, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_features == 0 {
            return Err(Error::InvalidArgument("dim and num_features must be positive".into()));
        }
        for (name, (lo, hi)) in [("lengthscale", self.lengthscale_range), ("signal variance", self.signal_variance_range)] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} range needs 0 < low < high, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// `n` uniform points on the unit cube with their exact function values.
pub fn sample_dataset<S: Smooth + ?Sized>(f: &S, n: usize, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let d = f.dim();
    let mut data = Dataset::default();
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let y = f.value(&x)?;
        data.push(x, y);
    }
    Ok(data)
}

#[cfg(test)]
mod tests;
