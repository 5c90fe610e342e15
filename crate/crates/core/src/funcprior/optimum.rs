//! Multi-start projected gradient ascent on the unit cube.

use rand::Rng as _;

use super::FunctionSample;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A differentiable objective on `[0,1]^d`.
pub trait Smooth {
    fn dim(&self) -> usize;
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_grad(x)?.0)
    }
}

impl Smooth for FunctionSample {
    fn dim(&self) -> usize {
        FunctionSample::dim(self)
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval_with_grad(x)
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.eval(x)
    }
}

/// Adapts a closure returning `(value, gradient)`.
pub struct FnSmooth<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Smooth for FnSmooth<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(x))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AscentConfig {
    pub max_iters: usize,
    /// Stop once the projected gradient norm drops below this.
    pub grad_tol: f64,
    pub initial_step: f64,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { max_iters: 200, grad_tol: 1e-8, initial_step: 0.1, armijo: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Default restart count for a dimension.
pub fn default_restarts(dim: usize) -> usize {
    if dim <= 2 {
        32
    } else {
        64
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: "gradient_ascent" })
    }
}

/// Gradient with outward-pointing components at active bounds removed.
fn projected_norm(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| if (xi <= 0.0 && gi < 0.0) || (xi >= 1.0 && gi > 0.0) { 0.0 } else { gi * gi })
        .sum::<f64>()
        .sqrt()
}

/// Projected gradient ascent with Armijo backtracking from `start`.
pub fn ascend<S: Smooth + ?Sized>(f: &S, start: &[f64], cfg: &AscentConfig) -> Result<Optimum> {
    let mut x: Vec<f64> = start.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (mut fx, mut g) = f.value_grad(&x)?;
    finite(fx)?;
    let mut step = cfg.initial_step;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..cfg.max_iters {
        if projected_norm(&x, &g) < cfg.grad_tol {
            break;
        }
        let mut t = step;
        let accepted = loop {
            for ((xn, xi), gi) in trial.iter_mut().zip(&x).zip(&g) {
                *xn = (xi + t * gi).clamp(0.0, 1.0);
            }
            let moved: f64 = trial.iter().zip(&x).zip(&g).map(|((a, b), gi)| gi * (a - b)).sum();
            if moved <= 0.0 {
                break None;
            }
            let (ft, gt) = f.value_grad(&trial)?;
            if finite(ft)? >= fx + cfg.armijo * moved {
                break Some((ft, gt));
            }
            t *= 0.5;
            if t < 1e-16 {
                break None;
            }
        };
        let Some((ft, gt)) = accepted else { break };
        // Barzilai-Borwein step from the accepted move; fall back to growth
        // when the local curvature is not concave.
        let (mut ss, mut sy) = (0.0, 0.0);
        for (((xn, xi), gn), gi) in trial.iter().zip(&x).zip(&gt).zip(&g) {
            let s = xn - xi;
            ss += s * s;
            sy -= s * (gn - gi);
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e3) } else { (2.0 * t).min(1e3) };
        std::mem::swap(&mut x, &mut trial);
        fx = ft;
        g = gt;
    }
    Ok(Optimum { x, value: fx })
}

/// Best of `restarts` ascents started from uniform points.
pub fn find_optimum<S: Smooth + ?Sized>(f: &S, restarts: usize, rng: &mut Rng) -> Result<Optimum> {
    find_optimum_with(f, restarts, &AscentConfig::default(), rng)
}

pub fn find_optimum_with<S: Smooth + ?Sized>(f: &S, restarts: usize, cfg: &AscentConfig, rng: &mut Rng) -> Result<Optimum> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let d = f.dim();
    let mut best: Option<Optimum> = None;
    for _ in 0..restarts {
        let start: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let cand = ascend(f, &start, cfg)?;
        if best.as_ref().is_none_or(|b| cand.value > b.value) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one restart"))
}
