use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PriorHyperparams;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Random Fourier feature map `phi(x) = sqrt(2 gamma^2 / m) cos(W x + b)`.
///
/// Inner products `phi(x) . phi(x')` approximate the squared-exponential
/// kernel with the stored lengthscales and signal variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffFeatures {
    dim: usize,
    /// `m x d`, row-major.
    weights: Vec<f64>,
    offsets: Vec<f64>,
    signal_variance: f64,
    lengthscales: Vec<f64>,
}

impl RffFeatures {
    pub fn new(dim: usize, weights: Vec<f64>, offsets: Vec<f64>, signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let m = offsets.len();
        if dim == 0 || m == 0 || weights.len() != m * dim || lengthscales.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "feature map with d={dim}, {} weights, {m} offsets, {} lengthscales",
                weights.len(),
                lengthscales.len()
            )));
        }
        if !(signal_variance > 0.0) || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidArgument("kernel parameters must be positive".into()));
        }
        if weights.iter().chain(&offsets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature parameters".into()));
        }
        Ok(Self { dim, weights, offsets, signal_variance, lengthscales })
    }

    /// Draws `W` rows from `N(0, diag(l^-2))` and `b` from `U(0, 2 pi)`.
    pub fn sample(dim: usize, num_features: usize, lengthscales: &[f64], signal_variance: f64, rng: &mut Rng) -> Result<Self> {
        if lengthscales.len() != dim {
            return Err(Error::Dimension { expected: dim, got: lengthscales.len() });
        }
        let mut weights = Vec::with_capacity(num_features * dim);
        for _ in 0..num_features {
            for l in lengthscales {
                let z: f64 = StandardNormal.sample(rng);
                weights.push(z / l);
            }
        }
        let offsets = (0..num_features)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self::new(dim, weights, offsets, signal_variance, lengthscales.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_features(&self) -> usize {
        self.offsets.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    fn scale(&self) -> f64 {
        (2.0 * self.signal_variance / self.num_features() as f64).sqrt()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    fn phase(&self, j: usize, x: &[f64]) -> f64 {
        let row = &self.weights[j * self.dim..(j + 1) * self.dim];
        row.iter().zip(x).fold(self.offsets[j], |acc, (w, xi)| acc + w * xi)
    }

    /// Feature vector `phi(x)` of length `m`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let s = self.scale();
        Ok((0..self.num_features()).map(|j| s * self.phase(j, x).cos()).collect())
    }

    /// Approximate kernel value `phi(x) . phi(x')`.
    pub fn kernel(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        let a = self.features(x)?;
        let b = self.features(x2)?;
        Ok(a.iter().zip(&b).map(|(p, q)| p * q).sum())
    }

    /// Exact squared-exponential kernel with the same hyperparameters.
    pub fn exact_kernel(&self, x: &[f64], x2: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }

    /// `phi(x) . coefs` and its gradient with respect to `x`.
    pub fn linear_with_grad(&self, coefs: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let s = self.scale();
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim];
        for (j, c) in coefs.iter().enumerate() {
            let (sin, cos) = self.phase(j, x).sin_cos();
            value += c * cos;
            let row = &self.weights[j * self.dim..(j + 1) * self.dim];
            for (g, w) in grad.iter_mut().zip(row) {
                *g -= c * sin * w;
            }
        }
        grad.iter_mut().for_each(|g| *g *= s);
        Ok((s * value, grad))
    }

    pub fn linear(&self, coefs: &[f64], x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let s = self.scale();
        let v = coefs.iter().enumerate().fold(0.0, |acc, (j, c)| acc + c * self.phase(j, x).cos());
        Ok(s * v)
    }
}

/// One parametric draw `f(x) = phi(x) . beta` from the approximate GP prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSample {
    features: RffFeatures,
    coefs: Vec<f64>,
}

impl FunctionSample {
    pub fn new(features: RffFeatures, coefs: Vec<f64>) -> Result<Self> {
        if coefs.len() != features.num_features() {
            return Err(Error::Dimension { expected: features.num_features(), got: coefs.len() });
        }
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficients".into()));
        }
        Ok(Self { features, coefs })
    }

    pub fn features(&self) -> &RffFeatures {
        &self.features
    }

    pub fn coefs(&self) -> &[f64] {
        &self.coefs
    }

    pub fn dim(&self) -> usize {
        self.features.dim
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.features.linear(&self.coefs, x)
    }

    /// Value and analytic gradient.
    pub fn eval_with_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.features.linear_with_grad(&self.coefs, x)
    }
}

/// Draws hyperparameters from the hyperprior, then a feature map and `beta ~ N(0, I)`.
pub fn sample_function(hp: &PriorHyperparams, rng: &mut Rng) -> Result<FunctionSample> {
    hp.validate()?;
    let (llo, lhi) = hp.lengthscale_range;
    let (slo, shi) = hp.signal_variance_range;
    let lengthscales: Vec<f64> = (0..hp.dim).map(|_| rng.random_range(llo..lhi)).collect();
    let signal_variance = rng.random_range(slo..shi);
    sample_function_with(hp.dim, hp.num_features, &lengthscales, signal_variance, rng)
}

/// Draws a function with fixed kernel hyperparameters.
pub fn sample_function_with(
    dim: usize,
    num_features: usize,
    lengthscales: &[f64],
    signal_variance: f64,
    rng: &mut Rng,
) -> Result<FunctionSample> {
    let features = RffFeatures::sample(dim, num_features, lengthscales, signal_variance, rng)?;
    let coefs = (0..num_features).map(|_| StandardNormal.sample(rng)).collect();
    FunctionSample::new(features, coefs)
}
