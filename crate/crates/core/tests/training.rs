use fibo::funcprior::{generate_corpus, CorpusConfig, PriorHyperparams};
use fibo::trainer::{context_blind_nll, mean_nll, split_indices, train, TrainConfig};
use fibo::{Model, ModelConfig};

// Desk-scale d=1 run: 4,000 pairs, 40 epochs.
#[test]
fn desk_scale_training_improves_and_uses_context() {
    let hp = PriorHyperparams::new(1);
    let corpus = generate_corpus(&hp, &CorpusConfig::new(1, 4000), 11).unwrap().corpus;
    let config = TrainConfig { seed: 5, ..TrainConfig::default() };
    let outcome = train(&corpus, Model::new(ModelConfig::new(1), 5).unwrap(), Some(hp), &config, |r, _| {
        eprintln!("epoch {} train {:.3} val {:?}", r.epoch, r.train_nll, r.val_nll);
    })
    .unwrap();

    let meta = &outcome.checkpoint.training;
    let (initial, last) = (meta.initial_val_nll.unwrap(), meta.final_val_nll.unwrap());
    assert!(last <= initial - 0.5, "val nll {initial} -> {last}");

    let (_, val_idx) = split_indices(corpus.pairs.len(), config.validation_fraction, config.seed);
    let val: Vec<_> = val_idx.iter().map(|&i| corpus.pairs[i].clone()).collect();
    let model = &outcome.checkpoint.model;
    let with_context = mean_nll(model, &val, 64).unwrap();
    let blind = context_blind_nll(model, &val).unwrap();
    assert!((with_context - last).abs() < 1e-9);
    assert!(with_context < blind, "context {with_context} vs blind {blind}");
}
