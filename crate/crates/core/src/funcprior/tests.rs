use super::*;
use crate::rng::{child, seeded};

fn uniform_point(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

fn degenerate_cosine() -> FunctionSample {
    let tau = std::f64::consts::TAU;
    let feats = RffFeatures::new(1, vec![tau], vec![std::f64::consts::PI], 0.5, vec![1.0]).unwrap();
    FunctionSample::new(feats, vec![1.0]).unwrap()
}

#[test]
fn kernel_diagonal_near_signal_variance() {
    let mut rng = seeded(1);
    let feats = RffFeatures::sample(2, 2048, &[1.0, 1.0], 1.0, &mut rng).unwrap();
    let mean: f64 = (0..100)
        .map(|_| {
            let x = uniform_point(2, &mut rng);
            feats.kernel(&x, &x).unwrap()
        })
        .sum::<f64>()
        / 100.0;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn kernel_at_unit_distance() {
    let mut rng = seeded(2);
    let (x, x2) = ([0.1, 0.2], [0.1 + 0.6, 0.2 + 0.8]);
    let mean: f64 = (0..50)
        .map(|_| RffFeatures::sample(2, 2048, &[1.0, 1.0], 1.0, &mut rng).unwrap().kernel(&x, &x2).unwrap())
        .sum::<f64>()
        / 50.0;
    assert!((mean - (-0.5f64).exp()).abs() < 0.05, "{mean}");
}

#[test]
fn kernel_error_shrinks_with_feature_count() {
    let mut rng = seeded(3);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20).map(|_| (uniform_point(2, &mut rng), uniform_point(2, &mut rng))).collect();
    let mut err = |m: usize| {
        let mut total = 0.0;
        for _ in 0..50 {
            let feats = RffFeatures::sample(2, m, &[0.5, 0.5], 1.0, &mut rng).unwrap();
            for (a, b) in &pairs {
                total += (feats.kernel(a, b).unwrap() - feats.exact_kernel(a, b)).abs();
            }
        }
        total
    };
    let ratio = err(512) / err(2048);
    assert!((1.5..=2.5).contains(&ratio), "{ratio}");
}

#[test]
fn degenerate_sample_values() {
    let f = degenerate_cosine();
    assert!((f.eval(&[0.5]).unwrap() - 1.0).abs() < 1e-12);
    assert!((f.eval(&[0.0]).unwrap() + 1.0).abs() < 1e-12);
    let opt = find_optimum(&f, 8, &mut seeded(0)).unwrap();
    assert!((opt.x[0] - 0.5).abs() < 1e-6 && (opt.value - 1.0).abs() < 1e-6, "{opt:?}");
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = seeded(4);
    let f = sample_function(&PriorHyperparams::new(3), &mut rng).unwrap();
    let h = 1e-6;
    for _ in 0..20 {
        let x = uniform_point(3, &mut rng);
        let (_, g) = f.eval_with_grad(&x).unwrap();
        for i in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (f.eval(&xp).unwrap() - f.eval(&xm).unwrap()) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1.0);
            assert!(rel < 1e-6, "{rel}");
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_checks_dimension() {
    let f = sample_function(&PriorHyperparams::new(2), &mut seeded(5)).unwrap();
    let x = [0.3, 0.7];
    assert_eq!(f.eval(&x).unwrap().to_bits(), f.eval(&x).unwrap().to_bits());
    assert_eq!(f.eval(&x).unwrap().to_bits(), f.eval_with_grad(&x).unwrap().0.to_bits());
    assert!(matches!(f.eval(&[0.1]), Err(Error::Dimension { expected: 2, got: 1 })));
}

#[test]
fn quadratic_bowl_maximizer() {
    for d in 1..=4 {
        let f = FnSmooth {
            dim: d,
            f: |x: &[f64]| {
                let v = -x.iter().map(|v| (v - 0.3).powi(2)).sum::<f64>();
                (v, x.iter().map(|v| -2.0 * (v - 0.3)).collect())
            },
        };
        let opt = find_optimum(&f, 4, &mut seeded(d as u64)).unwrap();
        assert!(opt.x.iter().all(|v| (v - 0.3).abs() < 1e-6), "{opt:?}");
    }
}

#[test]
fn non_finite_objective_is_an_error() {
    let f = FnSmooth { dim: 1, f: |_: &[f64]| (f64::NAN, vec![0.0]) };
    assert!(matches!(find_optimum(&f, 2, &mut seeded(0)), Err(Error::NonFinite { .. })));
    assert!(find_optimum(&degenerate_cosine(), 0, &mut seeded(0)).is_err());
}

#[test]
fn optimum_beats_dense_probes() {
    let hp = PriorHyperparams::new(2);
    let mut wins = 0;
    for i in 0..100 {
        let mut rng = child(77, i);
        let f = sample_function(&hp, &mut rng).unwrap();
        let opt = find_optimum(&f, 32, &mut rng).unwrap();
        let probe = (0..10_000).map(|_| f.eval(&uniform_point(2, &mut rng)).unwrap()).fold(f64::MIN, f64::max);
        if opt.value >= probe {
            wins += 1;
        }
    }
    assert!(wins >= 99, "{wins}/100");
}

#[test]
fn dataset_sampling() {
    let f = sample_function(&PriorHyperparams::new(2), &mut seeded(6)).unwrap();
    let single = sample_dataset(&f, 1, &mut seeded(7)).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single.values()[0].to_bits(), f.eval(&single.points()[0]).unwrap().to_bits());
    let big = sample_dataset(&f, 100_000, &mut seeded(8)).unwrap();
    assert!(big.points().iter().all(|p| crate::data::in_unit_cube(p)));
    for i in 0..2 {
        let mean = big.points().iter().map(|p| p[i]).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }
    assert!(sample_dataset(&f, 0, &mut seeded(0)).is_err());
}

#[test]
fn optimum_independent_of_dataset_draw() {
    let f = sample_function(&PriorHyperparams::new(2), &mut seeded(9)).unwrap();
    let a = find_optimum(&f, 16, &mut seeded(10)).unwrap();
    let _ = sample_dataset(&f, 50, &mut seeded(11)).unwrap();
    let _ = sample_dataset(&f, 50, &mut seeded(12)).unwrap();
    let b = find_optimum(&f, 16, &mut seeded(10)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hyperparams_validation() {
    let mut hp = PriorHyperparams::new(2);
    assert!(hp.validate().is_ok());
    hp.lengthscale_range = (0.0, 1.0);
    assert!(hp.validate().is_err());
    hp.lengthscale_range = (2.0, 1.0);
    assert!(hp.validate().is_err());
}

#[test]
fn quota_arithmetic_small() {
    let hp = PriorHyperparams::new(1);
    let mut cfg = CorpusConfig::new(1, 4);
    cfg.bins_per_dim = 2;
    cfg.n_min = 2;
    cfg.n_max = 5;
    let rep = generate_corpus(&hp, &cfg, 13).unwrap();
    let low = rep.corpus.pairs.iter().filter(|p| p.x_star[0] < 0.5).count();
    assert_eq!((rep.corpus.pairs.len(), low), (4, 2));
    assert_eq!(rep.fills, vec![2, 2]);
    for p in &rep.corpus.pairs {
        assert!((2..=5).contains(&p.data.len()));
        assert!(p.data.values().iter().all(|&y| y <= p.y_star));
    }
}

#[test]
fn quota_exhaustion_reports_fills() {
    let hp = PriorHyperparams::new(2);
    let mut cfg = CorpusConfig::new(2, 64);
    cfg.max_draws = 10;
    cfg.restarts = 2;
    match generate_corpus(&hp, &cfg, 1) {
        Err(Error::QuotaExhausted { draws, quota, fills }) => {
            assert_eq!((draws, quota, fills.len()), (10, 4, 16));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn corpus_roundtrip_and_reproducibility() {
    let hp = PriorHyperparams::new(2);
    let mut cfg = CorpusConfig::new(2, 20);
    cfg.n_min = 3;
    cfg.n_max = 6;
    cfg.restarts = 4;
    let a = generate_corpus(&hp, &cfg, 21).unwrap().corpus;
    cfg.workers = 3;
    let b = generate_corpus(&hp, &cfg, 21).unwrap().corpus;
    assert_eq!(a.to_bytes(), b.to_bytes());
    let bytes = a.to_bytes();
    assert_eq!(&bytes[..4], b"FIBC");
    assert_eq!(Corpus::read_from(&mut bytes.as_slice()).unwrap(), a);
    let mut jl = Vec::new();
    a.write_jsonl(&mut jl).unwrap();
    assert_eq!(Corpus::read_jsonl(jl.as_slice()).unwrap(), a);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Corpus::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
    assert!(Corpus::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
}

