//! Encoder and flow bundled into one conditional model `p(x* | D)`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, PreparedContext};
use crate::nn::ParamSet;
use crate::rng::{self, Rng};

/// Targets are pulled this far inside the unit cube before the logit.
pub const TARGET_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        let encoder = EncoderConfig::new(dim);
        let flow = FlowConfig::new(dim, encoder.context_dim);
        Self { encoder, flow }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.flow.validate()?;
        if self.flow.dim != self.encoder.dim || self.flow.context_dim != self.encoder.context_dim {
            return Err(Error::InvalidArgument("encoder and flow sizes disagree".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    flow: Flow,
    params: ParamSet,
}

impl Model {
    /// Freshly initialized model; the flow starts as the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::register(config.encoder.clone(), &mut params, &mut rng)?;
        let flow = Flow::register(config.flow.clone(), &mut params, &mut rng)?;
        Ok(Self { config, encoder, flow, params })
    }

    /// Rebuilds a model around stored parameter values.
    pub fn with_params(config: ModelConfig, params: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.assign(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn flow(&self) -> &Flow {
        &self.flow
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn context(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.encoder.encode(&self.params, data)
    }

    /// Posterior over the maximizer given `data`, with the context computed
    /// once.
    pub fn posterior(&self, data: &Dataset) -> Result<Posterior<'_>> {
        let c = self.context(data)?;
        Ok(Posterior { model: self, prepared: self.flow.prepare(&self.params, &c)?, context: c })
    }

    /// Per-pair `log p(x* | D)` on the tape, as a `[B, 1]` node.
    pub fn log_prob_batch(&self, tape: &mut Tape, vars: &[Var], batch: &[(&Dataset, &[f64])]) -> Result<Var> {
        let d = self.dim();
        let mut targets = Vec::with_capacity(batch.len() * d);
        for (_, x) in batch {
            if x.len() != d {
                return Err(Error::Dimension { expected: d, got: x.len() });
            }
            targets.extend(x.iter().map(|v| v.clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP)));
        }
        let datasets: Vec<&Dataset> = batch.iter().map(|(data, _)| *data).collect();
        let c = self.encoder.encode_batch(tape, vars, &datasets)?;
        let x = Tensor::new(vec![batch.len(), d], targets)?;
        self.flow.log_prob_batch(tape, vars, &x, c)
    }

    /// Mean negative log-likelihood of a batch, as a scalar node.
    pub fn nll(&self, tape: &mut Tape, vars: &[Var], batch: &[(&Dataset, &[f64])]) -> Result<Var> {
        let lp = self.log_prob_batch(tape, vars, batch)?;
        let mean = tape.mean_all(lp)?;
        tape.affine(mean, -1.0, 0.0)
    }
}

pub struct Posterior<'a> {
    model: &'a Model,
    context: Vec<f64>,
    prepared: PreparedContext,
}

impl Posterior<'_> {
    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn sample(&self, q: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        self.model.flow.sample_prepared(&self.model.params, &self.prepared, q, rng)
    }

    /// `log p(x | D)` with `x` clamped like the training targets.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let x: Vec<f64> = x.iter().map(|v| v.clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP)).collect();
        self.model.flow.log_prob_prepared(&self.model.params, &self.prepared, &x)
    }
}
