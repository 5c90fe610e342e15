//! Benchmark objectives under the maximization convention.

use std::f64::consts::{E, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::boloop::Objective;
use crate::data::in_unit_cube;
use crate::error::{Error, Result};
use crate::funcprior::{find_optimum, sample_function, FunctionSample, PriorHyperparams};
use crate::rng;

/// Affine map between the unit cube and a native box. Corners map exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMap {
    pub bounds: Vec<(f64, f64)>,
}

impl DomainMap {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidArgument("domain needs at least one dimension".into()));
        }
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::InvalidArgument(format!("bad bounds ({lo}, {hi})")));
        }
        Ok(Self { bounds })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi); dim])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn to_native(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        Ok(u.iter().zip(&self.bounds).map(|(u, (lo, hi))| (1.0 - u) * lo + u * hi).collect())
    }

    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter().zip(&self.bounds).map(|(x, (lo, hi))| (x - lo) / (hi - lo)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kind {
    Ackley,
    Levy,
    Rosenbrock,
    Hartmann3,
    Prior(Box<FunctionSample>),
}

/// Best known value and a location attaining it, in native coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownOptimum {
    pub value: f64,
    pub location: Vec<f64>,
    /// False when found numerically rather than analytically.
    pub analytic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchObjective {
    pub id: String,
    pub domain: DomainMap,
    pub kind: Kind,
    pub optimum: Option<KnownOptimum>,
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 3]; 4] = [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]];
const HARTMANN_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];
pub const HARTMANN3_OPTIMUM: f64 = 3.862_782_147_820_756;
pub const HARTMANN3_ARGMAX: [f64; 3] = [0.114_614, 0.555_649, 0.852_547];

/// Restarts used to locate the maximizer of prior-sampled objectives.
pub const PRIOR_OPTIMUM_RESTARTS: usize = 256;

fn ackley(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let cs = x.iter().map(|v| (TAU * v).cos()).sum::<f64>() / n;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cs.exp() + 20.0 + E
}

fn levy(x: &[f64]) -> f64 {
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let last = w[w.len() - 1];
    let mut sum = (PI * w[0]).sin().powi(2);
    for wi in &w[..w.len() - 1] {
        sum += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
    }
    sum + (last - 1.0).powi(2) * (1.0 + (TAU * last).sin().powi(2))
}

fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2).map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (w[0] - 1.0).powi(2)).sum()
}

fn hartmann3(x: &[f64]) -> f64 {
    (0..4)
        .map(|i| {
            let r: f64 = (0..3).map(|j| HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]).powi(2)).sum();
            HARTMANN_ALPHA[i] * (-r).exp()
        })
        .sum()
}

fn bad_dim(name: &str, dim: usize) -> Error {
    Error::InvalidArgument(format!("{name} is not registered for dimension {dim}"))
}

impl BenchObjective {
    pub fn ackley(dim: usize) -> Result<Self> {
        if !(1..=4).contains(&dim) {
            return Err(bad_dim("ackley", dim));
        }
        Ok(Self {
            id: format!("ackley-{dim}"),
            domain: DomainMap::cube(dim, -32.768, 32.768)?,
            kind: Kind::Ackley,
            optimum: Some(KnownOptimum { value: 0.0, location: vec![0.0; dim], analytic: true }),
        })
    }

    pub fn levy(dim: usize) -> Result<Self> {
        if !(1..=4).contains(&dim) {
            return Err(bad_dim("levy", dim));
        }
        Ok(Self {
            id: format!("levy-{dim}"),
            domain: DomainMap::cube(dim, -10.0, 10.0)?,
            kind: Kind::Levy,
            optimum: Some(KnownOptimum { value: 0.0, location: vec![1.0; dim], analytic: true }),
        })
    }

    pub fn rosenbrock(dim: usize) -> Result<Self> {
        if !(2..=4).contains(&dim) {
            return Err(bad_dim("rosenbrock", dim));
        }
        Ok(Self {
            id: format!("rosenbrock-{dim}"),
            domain: DomainMap::cube(dim, -5.0, 10.0)?,
            kind: Kind::Rosenbrock,
            optimum: Some(KnownOptimum { value: 0.0, location: vec![1.0; dim], analytic: true }),
        })
    }

    pub fn hartmann3() -> Self {
        Self {
            id: "hartmann-3".into(),
            domain: DomainMap::cube(3, 0.0, 1.0).expect("valid bounds"),
            kind: Kind::Hartmann3,
            optimum: Some(KnownOptimum { value: HARTMANN3_OPTIMUM, location: HARTMANN3_ARGMAX.to_vec(), analytic: true }),
        }
    }

    /// Function `index` of the prior-sampled set for `dim`, with its
    /// maximizer located numerically.
    pub fn prior(dim: usize, index: usize, prior_seed: u64) -> Result<Self> {
        let hp = PriorHyperparams::new(dim);
        let stream = ((dim as u64) << 32) | index as u64;
        let f = sample_function(&hp, &mut rng::child(prior_seed, stream))?;
        let opt = find_optimum(&f, PRIOR_OPTIMUM_RESTARTS, &mut rng::child(prior_seed, stream ^ 0x0917_0000_0000_0000))?;
        Self::from_function(format!("prior-d{dim}-{index}"), f, Some(opt.value), Some(opt.x))
    }

    pub fn from_function(id: String, f: FunctionSample, value: Option<f64>, location: Option<Vec<f64>>) -> Result<Self> {
        let dim = f.dim();
        let optimum = match (value, location) {
            (Some(value), Some(location)) => Some(KnownOptimum { value, location, analytic: false }),
            _ => None,
        };
        Ok(Self { id, domain: DomainMap::cube(dim, 0.0, 1.0)?, kind: Kind::Prior(Box::new(f)), optimum })
    }

    /// Looks up `ackley-<d>`, `levy-<d>`, `rosenbrock-<d>`, `hartmann-3` or
    /// `prior-d<d>-<k>`.
    pub fn from_id(id: &str, prior_seed: u64) -> Result<Self> {
        let unknown = || Error::UnknownObjective(id.to_string());
        if id == "hartmann-3" {
            return Ok(Self::hartmann3());
        }
        if let Some(rest) = id.strip_prefix("prior-d") {
            let (d, k) = rest.split_once('-').ok_or_else(unknown)?;
            let d: usize = d.parse().map_err(|_| unknown())?;
            let k: usize = k.parse().map_err(|_| unknown())?;
            if !(1..=4).contains(&d) {
                return Err(bad_dim("prior", d));
            }
            return Self::prior(d, k, prior_seed);
        }
        let (name, d) = id.rsplit_once('-').ok_or_else(unknown)?;
        let d: usize = d.parse().map_err(|_| unknown())?;
        match name {
            "ackley" => Self::ackley(d),
            "levy" => Self::levy(d),
            "rosenbrock" => Self::rosenbrock(d),
            _ => Err(unknown()),
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Group label used in summaries.
    pub fn task_set(&self) -> &'static str {
        match self.kind {
            Kind::Prior(_) => "prior",
            _ => "synthetic",
        }
    }

    /// Value at a native point, larger is better.
    pub fn eval_native(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(match &self.kind {
            Kind::Ackley => -ackley(x),
            Kind::Levy => -levy(x),
            Kind::Rosenbrock => -rosenbrock(x),
            Kind::Hartmann3 => hartmann3(x),
            Kind::Prior(f) => f.eval(x)?,
        })
    }
}

/// Maps a unit-cube point to native coordinates and evaluates there.
pub fn eval_objective(obj: &BenchObjective, x_unit: &[f64]) -> Result<f64> {
    if x_unit.len() != obj.dim() {
        return Err(Error::Dimension { expected: obj.dim(), got: x_unit.len() });
    }
    if !in_unit_cube(x_unit) {
        return Err(Error::OutOfDomain(x_unit.to_vec()));
    }
    obj.eval_native(&obj.domain.to_native(x_unit)?)
}

impl Objective for BenchObjective {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        BenchObjective::dim(self)
    }

    fn eval_unit(&self, x: &[f64]) -> Result<f64> {
        eval_objective(self, x)
    }
}

/// On-disk record of a prior-sampled objective, so every method and any
/// later reader sees the identical function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRecord {
    pub id: String,
    pub function: FunctionSample,
    pub optimum: Option<KnownOptimum>,
}

impl ObjectiveRecord {
    pub fn of(obj: &BenchObjective) -> Option<Self> {
        match &obj.kind {
            Kind::Prior(f) => Some(Self { id: obj.id.clone(), function: (**f).clone(), optimum: obj.optimum.clone() }),
            _ => None,
        }
    }

    pub fn into_objective(self) -> Result<BenchObjective> {
        let (value, location) = match self.optimum {
            Some(o) => (Some(o.value), Some(o.location)),
            None => (None, None),
        };
        BenchObjective::from_function(self.id, self.function, value, location)
    }
}
