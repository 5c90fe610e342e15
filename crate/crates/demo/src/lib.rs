//! In-browser playground: draw functions from the prior, fit a tiny model,
//! look at its posterior over the maximizer, and race it against the
//! baselines.

use fibo::boloop::{gap, run_bo, Fibo, FnObjective, GpTs, RandomSearch, RunConfig, Suggester};
use fibo::funcprior::{find_optimum, generate_corpus, sample_function, CorpusConfig, FunctionSample, PriorHyperparams};
use fibo::trainer::{train, TrainConfig};
use fibo::{rng, Dataset, Model, ModelConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const GRID: usize = 200;

#[derive(Serialize)]
pub struct PriorDraw {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub argmax: f64,
    pub max: f64,
}

#[derive(Serialize)]
pub struct TrainReport {
    pub pairs: usize,
    pub epochs: usize,
    pub train_nll: Vec<f64>,
}

#[derive(Serialize)]
pub struct PosteriorView {
    pub xs: Vec<f64>,
    pub density: Vec<f64>,
    pub samples: Vec<f64>,
}

#[derive(Serialize)]
pub struct Race {
    pub method: String,
    pub best: Vec<f64>,
    pub final_gap: f64,
    pub seconds: f64,
}

/// Demo state for one-dimensional problems.
#[wasm_bindgen]
pub struct Demo {
    seed: u64,
    draws: u64,
    function: Option<(FunctionSample, f64)>,
    model: Model,
    trained_epochs: usize,
}

fn grid() -> Vec<f64> {
    (0..GRID).map(|i| (i as f64 + 0.5) / GRID as f64).collect()
}

fn tiny_config() -> ModelConfig {
    let mut config = ModelConfig::new(1);
    config.encoder.hidden = 32;
    config.encoder.width = 32;
    config.encoder.context_dim = 16;
    config.flow.context_dim = 16;
    config.flow.hidden = 32;
    config.flow.blocks = 2;
    config
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

impl Demo {
    pub fn sample_prior_native(&mut self) -> Result<PriorDraw, fibo::Error> {
        self.draws += 1;
        let f = sample_function(&PriorHyperparams::new(1), &mut rng::child(self.seed, self.draws))?;
        let opt = find_optimum(&f, 32, &mut rng::child(self.seed, self.draws ^ 0xa5a5))?;
        let xs = grid();
        let ys = xs.iter().map(|x| f.eval(&[*x])).collect::<Result<Vec<_>, _>>()?;
        self.function = Some((f, opt.value));
        Ok(PriorDraw { xs, ys, argmax: opt.x[0], max: opt.value })
    }

    /// Builds a fresh corpus of `pairs` and trains for `epochs`, warm
    /// starting from the current weights.
    pub fn train_native(&mut self, pairs: usize, epochs: usize) -> Result<TrainReport, fibo::Error> {
        let mut cfg = CorpusConfig::new(1, pairs);
        cfg.n_max = 30;
        cfg.restarts = 8;
        let corpus = generate_corpus(&PriorHyperparams::new(1), &cfg, rng::derive_seed(self.seed, self.trained_epochs as u64))?.corpus;
        let config = TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: self.seed ^ self.trained_epochs as u64,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, self.model.clone(), None, &config, |_, _| {})?;
        self.model = outcome.checkpoint.model;
        self.trained_epochs += epochs;
        Ok(TrainReport { pairs, epochs: self.trained_epochs, train_nll: outcome.history.iter().map(|r| r.train_nll).collect() })
    }

    pub fn posterior_native(&self, xs: &[f64], ys: &[f64], samples: usize) -> Result<PosteriorView, fibo::Error> {
        let data = Dataset::new(xs.iter().map(|x| vec![*x]).collect(), ys.to_vec())?;
        let post = self.model.posterior(&data)?;
        let grid = grid();
        let density = grid.iter().map(|x| post.log_prob(&[*x]).map(f64::exp)).collect::<Result<Vec<_>, _>>()?;
        let samples = post.sample(samples, &mut rng::child(self.seed, 0x5a))?.into_iter().map(|p| p[0]).collect();
        Ok(PosteriorView { xs: grid, density, samples })
    }

    /// Runs each method on the current prior draw with the same seed.
    pub fn race_native(&self, q: usize, total: usize, seed: u64) -> Result<Vec<Race>, fibo::Error> {
        let (f, y_star) = self.function.clone().ok_or_else(|| fibo::Error::InvalidArgument("draw a function first".into()))?;
        let objective = FnObjective { id: "prior".into(), dim: 1, f: move |x: &[f64]| f.eval(x).unwrap_or(f64::NAN) };
        let gp = GpTs::new(&PriorHyperparams::new(1), GpTs::DEFAULT_NOISE, 8, &mut rng::child(seed, 7))?;
        let fibo = Fibo { model: &self.model };
        let random = RandomSearch { dim: 1 };
        let methods: [&dyn Suggester; 3] = [&fibo, &gp, &random];
        let config = RunConfig::new(q, total, seed);
        methods
            .iter()
            .map(|m| {
                let trace = run_bo(&objective, *m, &config)?;
                let y_star = y_star.max(trace.best().unwrap_or(y_star));
                Ok(Race {
                    method: m.method().to_string(),
                    best: trace.running_best(),
                    final_gap: gap(&trace, y_star)?.final_gap(),
                    seconds: trace.records.iter().map(|r| r.suggest_seconds).sum(),
                })
            })
            .collect()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Demo {
        let seed = seed as u64;
        let model = Model::new(tiny_config(), seed).expect("valid demo config");
        Demo { seed, draws: 0, function: None, model, trained_epochs: 0 }
    }

    #[wasm_bindgen(js_name = samplePrior)]
    pub fn sample_prior(&mut self) -> Result<String, JsValue> {
        self.sample_prior_native().map(|d| to_json(&d)).map_err(js_err)
    }

    pub fn train(&mut self, pairs: usize, epochs: usize) -> Result<String, JsValue> {
        self.train_native(pairs, epochs).map(|r| to_json(&r)).map_err(js_err)
    }

    pub fn posterior(&self, xs: &[f64], ys: &[f64], samples: usize) -> Result<String, JsValue> {
        self.posterior_native(xs, ys, samples).map(|p| to_json(&p)).map_err(js_err)
    }

    pub fn race(&self, q: usize, total: usize, seed: u32) -> Result<String, JsValue> {
        self.race_native(q, total, seed as u64).map(|r| to_json(&r)).map_err(js_err)
    }
}
