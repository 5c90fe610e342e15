use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::funcprior::{find_optimum, sample_dataset, sample_function, sample_function_with, PriorHyperparams};
use crate::model::ModelConfig;
use crate::opcount;
use crate::rng::seeded;

fn small_model(d: usize) -> Model {
    let mut config = ModelConfig::new(d);
    config.encoder.hidden = 16;
    config.encoder.width = 16;
    config.encoder.context_dim = 8;
    config.flow.context_dim = 8;
    config.flow.hidden = 16;
    config.flow.blocks = 2;
    Model::new(config, 3).unwrap()
}

fn random_data(d: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let values = points.iter().map(|p| p.iter().map(|v| (v - 0.3).powi(2)).sum::<f64>()).collect();
    Dataset::new(points, values).unwrap()
}

#[test]
fn random_suggest_is_uniform_and_seeded() {
    let a = random_suggest(3, 100_000, &mut seeded(1));
    assert!(a.iter().flatten().all(|v| (0.0..1.0).contains(v)));
    for k in 0..3 {
        let mean = a.iter().map(|p| p[k]).sum::<f64>() / a.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "coordinate {k} mean {mean}");
    }
    assert_eq!(random_suggest(3, 7, &mut seeded(5)), random_suggest(3, 7, &mut seeded(5)));
}

#[test]
fn fibo_suggest_stays_inside_and_checks_inputs() {
    let model = small_model(2);
    let data = random_data(2, 30, 0);
    let pts = fibo_suggest(&model, &data, 50, &mut seeded(0)).unwrap();
    assert_eq!(pts.len(), 50);
    assert!(pts.iter().flatten().all(|v| *v > 0.0 && *v < 1.0));
    assert_eq!(pts, fibo_suggest(&model, &data, 50, &mut seeded(0)).unwrap());
    assert!(matches!(fibo_suggest(&model, &random_data(3, 5, 0), 2, &mut seeded(0)), Err(Error::Dimension { .. })));
    assert!(matches!(fibo_suggest(&model, &Dataset::default(), 2, &mut seeded(0)), Err(Error::EmptyDataset)));
}

#[test]
fn fibo_suggest_work_is_affine_in_data_size_and_batch() {
    let model = small_model(2);
    let ops = |n: usize, q: usize, seed: u64| {
        let data = random_data(2, n, seed);
        opcount::measure(|| fibo_suggest(&model, &data, q, &mut seeded(seed)).unwrap()).1
    };
    let base = ops(10, 5, 0);
    let per_point = ops(20, 5, 0) - base;
    let per_draw = ops(10, 10, 0) - base;
    // No data- or draw-dependent iteration: cost depends only on sizes.
    assert_eq!(ops(10, 5, 9), base);
    assert_eq!(ops(20, 10, 4), base + per_point + per_draw);
    assert_eq!(ops(40, 25, 1), base + 3 * per_point + 4 * per_draw);
    // The per-draw cost is exactly one flow pass per point.
    let c = model.context(&random_data(2, 10, 0)).unwrap();
    let prepared = model.flow().prepare(model.params(), &c).unwrap();
    let one = opcount::measure(|| model.flow().forward_prepared(model.params(), &prepared, &[0.1, -0.2]).unwrap()).1;
    assert_eq!(per_draw, 5 * one);
}

fn gp(d: usize, seed: u64, noise: f64, restarts: usize) -> GpTs {
    GpTs::new(&PriorHyperparams::new(d), noise, restarts, &mut seeded(seed)).unwrap()
}

#[test]
fn gp_ts_with_no_information_spreads_out() {
    let model = gp(2, 0, 1e6, 4);
    let data = Dataset::new(vec![vec![0.5, 0.5]], vec![1.0]).unwrap();
    let pts = model.suggest(&data, 200, &mut seeded(1)).unwrap();
    for k in 0..2 {
        let xs: Vec<f64> = pts.iter().map(|p| p[k]).collect();
        let mean = xs.iter().sum::<f64>() / 200.0;
        let std = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0).sqrt();
        assert!(std > 0.1, "coordinate {k} std {std}");
    }
}

#[test]
fn gp_ts_collapses_onto_a_noiseless_linear_target() {
    let mut rng = seeded(11);
    let truth = sample_function_with(1, 32, &[0.3], 1.0, &mut rng).unwrap();
    let data = sample_dataset(&truth, 200, &mut rng).unwrap();
    let model = GpTs::with_features(truth.features().clone(), 1e-8, 32).unwrap().with_standardize(false);
    let post = model.posterior(&data).unwrap();
    let fhat = model.sample_function(&post, &mut rng).unwrap();
    for _ in 0..50 {
        let x = [rng.random::<f64>()];
        let err = (fhat.eval(&x).unwrap() - truth.eval(&x).unwrap()).abs();
        assert!(err < 1e-3, "posterior draw off by {err} at {x:?}");
    }
    let best = find_optimum(&truth, 32, &mut seeded(2)).unwrap();
    let pick = model.suggest(&data, 1, &mut seeded(3)).unwrap();
    let attained = truth.eval(&pick[0]).unwrap();
    assert!(best.value - attained < 1e-3, "suggested {attained}, optimum {}", best.value);
}

#[test]
fn gp_ts_is_reproducible_and_validates() {
    let model = gp(2, 4, GpTs::DEFAULT_NOISE, 4);
    let data = random_data(2, 20, 2);
    assert_eq!(model.suggest(&data, 3, &mut seeded(8)).unwrap(), model.suggest(&data, 3, &mut seeded(8)).unwrap());
    assert!(matches!(model.suggest(&Dataset::default(), 1, &mut seeded(0)), Err(Error::EmptyDataset)));
    assert!(GpTs::new(&PriorHyperparams::new(2), 0.0, 4, &mut seeded(0)).is_err());
}

fn prior_objective(seed: u64) -> FnObjective<impl Fn(&[f64]) -> f64 + Sync> {
    let f = sample_function(&PriorHyperparams::new(2), &mut seeded(seed)).unwrap();
    FnObjective { id: format!("prior{seed}"), dim: 2, f: move |x: &[f64]| f.eval(x).unwrap() }
}

#[test]
fn run_bo_counts_and_running_best() {
    let obj = prior_objective(1);
    let trace = run_bo(&obj, &RandomSearch { dim: 2 }, &RunConfig::new(10, 200, 3)).unwrap();
    assert!(trace.is_complete());
    assert_eq!(trace.header.iterations, 19);
    assert_eq!(trace.records.len(), 20);
    assert_eq!(trace.evaluations(), 200);
    let mut best = f64::NEG_INFINITY;
    for r in &trace.records {
        for &y in &r.values {
            best = best.max(y);
        }
        assert_eq!(r.best, best);
    }
    assert_eq!(trace.running_best().len(), 200);
    assert!(RunConfig::new(10, 205, 0).iterations().is_err());
    assert!(RunConfig::new(0, 10, 0).iterations().is_err());
    assert_eq!(RunConfig::new(50, 200, 0).iterations().unwrap(), 3);
}

#[test]
fn run_bo_is_deterministic() {
    let obj = prior_objective(2);
    let model = small_model(2);
    let mut config = RunConfig::new(5, 30, 9);
    config.record_timing = false;
    let a = run_bo(&obj, &Fibo { model: &model }, &config).unwrap();
    let b = run_bo(&obj, &Fibo { model: &model }, &config).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    config.record_timing = true;
    let mut c = run_bo(&obj, &Fibo { model: &model }, &config).unwrap();
    assert!(c.records[1..].iter().all(|r| r.suggest_seconds > 0.0));
    c.records.iter_mut().for_each(|r| r.suggest_seconds = 0.0);
    assert_eq!(c, a);
}

struct Rogue;

impl Suggester for Rogue {
    fn method(&self) -> &str {
        "rogue"
    }

    fn suggest(&self, _: &Dataset, q: usize, _: &mut crate::rng::Rng) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.5, 0.5]; q])
    }
}

#[test]
fn run_bo_never_leaves_the_cube_and_records_failures() {
    let calls = AtomicUsize::new(0);
    let obj = FnObjective {
        id: "guarded".into(),
        dim: 2,
        f: |x: &[f64]| {
            assert!(in_unit_cube(x));
            calls.fetch_add(1, Ordering::Relaxed);
            1.0
        },
    };
    let trace = run_bo(&obj, &Rogue, &RunConfig::new(4, 12, 0)).unwrap();
    assert_eq!(calls.load(Ordering::Relaxed), 4);
    assert_eq!(trace.records.len(), 1);
    assert!(trace.error.as_deref().unwrap().contains("outside the unit cube"));
    assert!(!trace.is_complete());

    let nan = FnObjective { id: "nan".into(), dim: 1, f: |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { 0.0 } };
    let trace = run_bo(&nan, &RandomSearch { dim: 1 }, &RunConfig::new(10, 50, 0)).unwrap();
    assert!(trace.error.as_deref().unwrap().contains("NaN"));
    assert!(trace.records.is_empty());
}

#[test]
fn gap_examples() {
    assert_eq!(gap_value(1.0, 3.0, 5.0).unwrap(), 0.5);
    assert_eq!(gap_value(1.0, 1.0, 5.0).unwrap(), 0.0);
    assert_eq!(gap_value(1.0, 5.0, 5.0).unwrap(), 1.0);
    assert_eq!(gap_value(2.0, 2.0, 2.0).unwrap(), 1.0);
    assert_eq!(gap_value(1.0, 7.0, 5.0).unwrap(), 1.0);
    assert!(matches!(gap_value(3.0, 3.0, 2.0), Err(Error::DegenerateGap { .. })));
}

#[test]
fn gap_series_of_a_run() {
    let obj = prior_objective(3);
    let trace = run_bo(&obj, &RandomSearch { dim: 2 }, &RunConfig::new(10, 100, 1)).unwrap();
    let y0 = trace.initial_best().unwrap();
    let series = gap(&trace, trace.best().unwrap() + 1.0).unwrap();
    assert_eq!(series.values.len(), 100);
    assert_eq!(series.values[9], 0.0);
    assert!(series.values.windows(2).all(|w| w[0] <= w[1]));
    let exact = gap(&trace, trace.best().unwrap()).unwrap();
    assert_eq!(exact.final_gap(), 1.0);
    assert!(y0 <= trace.best().unwrap());
}

#[test]
fn trace_encodings() {
    let obj = prior_objective(4);
    let mut trace = run_bo(&obj, &RandomSearch { dim: 2 }, &RunConfig::new(3, 9, 2)).unwrap();
    let back = RunTrace::read_jsonl(&trace.to_jsonl()[..]).unwrap();
    assert_eq!(back, trace);
    trace.error = Some("iteration 3: boom".into());
    assert_eq!(RunTrace::read_jsonl(&trace.to_jsonl()[..]).unwrap(), trace);
    let text = String::from_utf8(trace.to_jsonl()).unwrap();
    assert!(text.lines().next().unwrap().starts_with("{\"type\":\"header\""));
    assert!(RunTrace::read_jsonl(&b"{\"type\":\"error\",\"message\":\"x\"}\n"[..]).is_err());

    let mut csv = Vec::new();
    trace.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "objective,method,seed,q,iteration,evaluation,x0,x1,value,best,suggest_seconds");
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("prior4,random,2,3,0,0,"));
}

proptest! {
    #[test]
    fn gap_series_is_monotone_and_bounded(values in prop::collection::vec(-10.0f64..10.0, 4..40), extra in 0.0f64..5.0) {
        let q = 4;
        let usable = values.len() / q * q;
        let header = TraceHeader {
            objective: "p".into(), method: "m".into(), dim: 1, seed: 0, q,
            iterations: usable / q - 1, initial_count: q, total_evals: usable,
        };
        let mut trace = RunTrace::new(header);
        let mut best = f64::NEG_INFINITY;
        for (t, chunk) in values[..usable].chunks(q).enumerate() {
            best = chunk.iter().copied().fold(best, f64::max);
            trace.records.push(IterationRecord {
                iteration: t, points: vec![vec![0.5]; q], values: chunk.to_vec(), best, suggest_seconds: 0.0,
            });
        }
        let series = gap(&trace, best + extra).unwrap();
        prop_assert!(series.values.iter().all(|g| (0.0..=1.0).contains(g)));
        prop_assert!(series.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
