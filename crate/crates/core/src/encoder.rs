//! Permutation-invariant set encoder: per-point embedding, optional
//! self-attention, mean pooling, and a linear projection to the context.

use serde::{Deserialize, Serialize};

use crate::data::{in_unit_cube, Dataset};
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamSet};
use crate::rng::Rng;

/// Floor on the context's `y` standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub width: usize,
    pub context_dim: usize,
    pub attention: bool,
}

impl EncoderConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: 64,
            width: 64,
            context_dim: if dim <= 2 { 64 } else { 128 },
            attention: false,
        }
    }

    /// Per-point input: coordinates, standardized value, and the context's
    /// `y` location and scale.
    pub fn input_width(&self) -> usize {
        self.dim + 3
    }

    pub fn validate(&self) -> Result<()> {
        if [self.dim, self.hidden, self.width, self.context_dim].contains(&0) {
            return Err(Error::InvalidArgument(format!("encoder sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    embed1: Linear,
    embed2: Linear,
    attention: Option<Attention>,
    proj: Linear,
}

impl Encoder {
    /// Registers the encoder's parameters in `params`.
    pub fn register(config: EncoderConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embed1 = Linear::register(params, "encoder.embed1", c.input_width(), c.hidden, false, rng);
        let embed2 = Linear::register(params, "encoder.embed2", c.hidden, c.width, false, rng);
        let attention = c.attention.then(|| Attention {
            query: Linear::register(params, "encoder.attn.query", c.width, c.width, false, rng),
            key: Linear::register(params, "encoder.attn.key", c.width, c.width, false, rng),
            value: Linear::register(params, "encoder.attn.value", c.width, c.width, false, rng),
            out: Linear::register(params, "encoder.attn.out", c.width, c.width, true, rng),
        });
        let proj = Linear::register(params, "encoder.proj", c.width, c.context_dim, false, rng);
        Ok(Self { config, embed1, embed2, attention, proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Feature rows of `data` in canonical order (sorted by coordinates,
    /// then value), so that pooling sums in the same order for every
    /// permutation of the input.
    pub fn point_features(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.config.dim;
        if data.dim() != d {
            return Err(Error::Dimension { expected: d, got: data.dim() });
        }
        if let Some(bad) = data.points().iter().find(|p| !in_unit_cube(p)) {
            return Err(Error::OutOfDomain(bad.clone()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&data.points()[a], &data.points()[b]);
            pa.iter()
                .zip(pb)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| data.values()[a].total_cmp(&data.values()[b]))
        });
        let sorted: Vec<f64> = order.iter().map(|&i| data.values()[i]).collect();
        let (mean, std) = standardization(&sorted);
        let mut rows = Vec::with_capacity(data.len() * self.config.input_width());
        for (&i, y) in order.iter().zip(&sorted) {
            rows.extend_from_slice(&data.points()[i]);
            rows.push((y - mean) / std);
            rows.push(mean.asinh());
            rows.push(std.asinh());
        }
        Ok(rows)
    }

    /// Context vectors `[B, c]` for a batch of datasets, recorded on `tape`.
    pub fn encode_batch(&self, tape: &mut Tape, vars: &[Var], batch: &[&Dataset]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty encoder batch".into()));
        }
        let mut rows = Vec::new();
        let mut offsets = vec![0];
        for data in batch {
            rows.extend(self.point_features(data)?);
            offsets.push(offsets.last().unwrap() + data.len());
        }
        let n = *offsets.last().unwrap();
        let x = tape.leaf(crate::diffcore::Tensor::new(vec![n, self.config.input_width()], rows)?);
        let h = self.embed1.forward(tape, vars, x)?;
        let h = tape.tanh(h)?;
        let h = self.embed2.forward(tape, vars, h)?;
        let mut h = tape.tanh(h)?;
        if let Some(att) = &self.attention {
            h = self.attend(tape, vars, att, h, &offsets)?;
        }
        let pooled = tape.segment_mean(h, &offsets)?;
        self.proj.forward(tape, vars, pooled)
    }

    /// Single-head scaled dot-product attention within each dataset, added
    /// back residually.
    fn attend(&self, tape: &mut Tape, vars: &[Var], att: &Attention, h: Var, offsets: &[usize]) -> Result<Var> {
        let q = att.query.forward(tape, vars, h)?;
        let k = att.key.forward(tape, vars, h)?;
        let v = att.value.forward(tape, vars, h)?;
        let scale = 1.0 / (self.config.width as f64).sqrt();
        let mut parts = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            let (start, len) = (w[0], w[1] - w[0]);
            let qs = tape.slice(q, 0, start, len)?;
            let ks = tape.slice(k, 0, start, len)?;
            let vs = tape.slice(v, 0, start, len)?;
            let kt = tape.transpose(ks)?;
            let scores = tape.matmul(qs, kt)?;
            let scores = tape.affine(scores, scale, 0.0)?;
            let weights = tape.softmax(scores, 1)?;
            parts.push(tape.matmul(weights, vs)?);
        }
        let mixed = tape.concat(&parts, 0)?;
        let mixed = att.out.forward(tape, vars, mixed)?;
        tape.add(h, mixed)
    }

    /// Context vector for one dataset.
    pub fn encode(&self, params: &ParamSet, data: &Dataset) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let c = self.encode_batch(&mut tape, &vars, &[data])?;
        Ok(tape.value(c).data().to_vec())
    }
}

/// Population mean and floored standard deviation.
pub fn standardization(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::max_gradient_error;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn random_data(d: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
        let values = (0..n).map(|_| rng.random_range(-3.0..5.0)).collect();
        Dataset::new(points, values).unwrap()
    }

    fn build(config: EncoderConfig) -> (Encoder, ParamSet) {
        let mut params = ParamSet::new();
        let enc = Encoder::register(config, &mut params, &mut seeded(1)).unwrap();
        (enc, params)
    }

    #[test]
    fn permutation_invariant_bitwise() {
        for attention in [false, true] {
            let (enc, params) = build(EncoderConfig { attention, ..EncoderConfig::new(3) });
            let data = random_data(3, 17, 2);
            let base = enc.encode(&params, &data).unwrap();
            assert_eq!(base.len(), 128);
            let mut idx: Vec<usize> = (0..17).collect();
            for s in 0..5 {
                idx.shuffle(&mut seeded(s));
                let shuffled = enc.encode(&params, &data.select(&idx)).unwrap();
                assert!(base.iter().zip(&shuffled).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn duplicating_points_is_a_no_op_without_attention() {
        let (enc, params) = build(EncoderConfig::new(2));
        let data = random_data(2, 9, 3);
        let twice: Vec<usize> = (0..9).chain(0..9).collect();
        let a = enc.encode(&params, &data).unwrap();
        let b = enc.encode(&params, &data.select(&twice)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn gradient_of_squared_norm() {
        for attention in [false, true] {
            let config = EncoderConfig { hidden: 5, width: 4, context_dim: 3, attention, ..EncoderConfig::new(2) };
            let (enc, params) = build(config);
            let data = [random_data(2, 4, 4), random_data(2, 3, 5)];
            let err = max_gradient_error(
                |tape, vars| {
                    let c = enc.encode_batch(tape, vars, &[&data[0], &data[1]])?;
                    let sq = tape.mul(c, c)?;
                    tape.sum_all(sq)
                },
                params.tensors(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "attention={attention}: {err}");
        }
    }

    #[test]
    fn batch_rows_match_single_encodings() {
        let (enc, params) = build(EncoderConfig::new(1));
        let sets = [random_data(1, 5, 6), random_data(1, 1, 7), random_data(1, 30, 8)];
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let c = enc.encode_batch(&mut tape, &vars, &[&sets[0], &sets[1], &sets[2]]).unwrap();
        for (i, s) in sets.iter().enumerate() {
            let single = enc.encode(&params, s).unwrap();
            let row = tape.value(c).row(i);
            assert!(single.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (enc, params) = build(EncoderConfig::new(2));
        assert!(matches!(enc.encode(&params, &Dataset::default()), Err(Error::EmptyDataset)));
        let wrong_dim = Dataset::new(vec![vec![0.5]], vec![1.0]).unwrap();
        assert!(matches!(enc.encode(&params, &wrong_dim), Err(Error::Dimension { .. })));
        let outside = Dataset::new(vec![vec![0.5, 1.5]], vec![1.0]).unwrap();
        assert!(matches!(enc.encode(&params, &outside), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn constant_values_use_the_floor() {
        let (mean, std) = standardization(&[2.0, 2.0, 2.0]);
        assert_eq!((mean, std), (2.0, STD_FLOOR));
        let (enc, params) = build(EncoderConfig::new(1));
        let data = Dataset::new(vec![vec![0.1], vec![0.9]], vec![2.0, 2.0]).unwrap();
        assert!(enc.encode(&params, &data).unwrap().iter().all(|v| v.is_finite()));
    }
}
