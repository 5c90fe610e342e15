//! GP Thompson sampling through exact Bayesian linear regression on random
//! Fourier features.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::Suggester;
use crate::data::Dataset;
use crate::encoder::standardization;
use crate::error::{Error, Result};
use crate::funcprior::{default_restarts, find_optimum, FunctionSample, PriorHyperparams, RffFeatures};
use crate::rng::Rng;

/// Baseline suggester. Kernel hyperparameters stay fixed for the lifetime of
/// the value; only the coefficients are resampled.
#[derive(Clone, Debug)]
pub struct GpTs {
    features: RffFeatures,
    noise: f64,
    restarts: usize,
    standardize: bool,
}

/// Gaussian posterior over the feature coefficients.
pub struct BlrPosterior {
    mean: DVector<f64>,
    /// Upper Cholesky factor `L^T` of the posterior precision.
    upper: DMatrix<f64>,
}

impl BlrPosterior {
    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// `beta = mean + L^-T eps`, which has covariance `A^-1`.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        let offset = self.upper.solve_upper_triangular(&eps).expect("factor has a positive diagonal");
        (&self.mean + offset).as_slice().to_vec()
    }
}

impl GpTs {
    pub const DEFAULT_NOISE: f64 = 1e-6;

    /// Lengthscales at the log-scale midpoint of the hyperprior range, the
    /// signal variance at its arithmetic midpoint, and frequencies drawn
    /// from `rng`.
    pub fn new(hp: &PriorHyperparams, noise: f64, restarts: usize, rng: &mut Rng) -> Result<Self> {
        hp.validate()?;
        let (llo, lhi) = hp.lengthscale_range;
        let (slo, shi) = hp.signal_variance_range;
        let lengthscales = vec![(llo * lhi).sqrt(); hp.dim];
        let features = RffFeatures::sample(hp.dim, hp.num_features, &lengthscales, 0.5 * (slo + shi), rng)?;
        Self::with_features(features, noise, restarts)
    }

    pub fn with_features(features: RffFeatures, noise: f64, restarts: usize) -> Result<Self> {
        if !(noise > 0.0 && noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("observation noise must be positive, got {noise}")));
        }
        if restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be at least 1".into()));
        }
        Ok(Self { features, noise, restarts, standardize: true })
    }

    pub fn default_restarts(dim: usize) -> usize {
        default_restarts(dim)
    }

    /// Whether observed values are z-scored before fitting (on by default).
    pub fn with_standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn features(&self) -> &RffFeatures {
        &self.features
    }

    /// Posterior `N(A^-1 Phi^T y / s2, A^-1)` with `A = Phi^T Phi / s2 + I`.
    pub fn posterior(&self, data: &Dataset) -> Result<BlrPosterior> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.features.dim();
        if data.dim() != d {
            return Err(Error::Dimension { expected: d, got: data.dim() });
        }
        let m = self.features.num_features();
        let n = data.len();
        let (shift, scale) = if self.standardize { standardization(data.values()) } else { (0.0, 1.0) };
        let mut phi = DMatrix::zeros(n, m);
        for (i, x) in data.points().iter().enumerate() {
            for (j, v) in self.features.features(x)?.into_iter().enumerate() {
                phi[(i, j)] = v;
            }
        }
        let y = DVector::from_iterator(n, data.values().iter().map(|v| (v - shift) / scale));
        let inv_noise = 1.0 / self.noise;
        let precision = phi.tr_mul(&phi) * inv_noise + DMatrix::identity(m, m);
        let chol = precision.cholesky().ok_or(Error::Singular)?;
        let mean = chol.solve(&(phi.tr_mul(&y) * inv_noise));
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(BlrPosterior { mean, upper: chol.l().transpose() })
    }

    /// One posterior function draw.
    pub fn sample_function(&self, posterior: &BlrPosterior, rng: &mut Rng) -> Result<FunctionSample> {
        FunctionSample::new(self.features.clone(), posterior.sample(rng))
    }
}

/// `q` maximizers of independent posterior function draws.
pub fn gp_ts_suggest(gp: &GpTs, data: &Dataset, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let posterior = gp.posterior(data)?;
    (0..q)
        .map(|_| {
            let f = gp.sample_function(&posterior, rng)?;
            Ok(find_optimum(&f, gp.restarts, rng)?.x)
        })
        .collect()
}

impl Suggester for GpTs {
    fn method(&self) -> &str {
        "gp_ts"
    }

    fn suggest(&self, data: &Dataset, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        gp_ts_suggest(self, data, q, rng)
    }
}
