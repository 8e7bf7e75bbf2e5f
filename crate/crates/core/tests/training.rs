use ccse_core::corpus::build_vocab;
use ccse_core::sampler::{draw_batches, plan_epoch};
use ccse_core::synthetic::{generate, SyntheticConfig};
use ccse_core::trainer::{train, EncodedCorpus, Model, TrainConfig, Trainer};

#[test]
fn loss_drops_after_most_steps_on_synthetic_corpus() {
    let splits = generate(&SyntheticConfig::default()).unwrap();
    let corpus = &splits.train;
    let cfg = TrainConfig::default();
    let model = Model::new(build_vocab(corpus, cfg.vocab_size).unwrap(), &cfg).unwrap();
    let encoded = EncodedCorpus::new(&model, corpus);
    let mut trainer = Trainer::new(model, &cfg);
    let (mut improved, mut steps) = (0usize, 0usize);
    for epoch in 0..2 {
        let plan = plan_epoch(&corpus.stats, &cfg.sampler, epoch).unwrap();
        for batch in draw_batches(corpus, &plan, &cfg.sampler) {
            let (code, doc) = encoded.batch(&batch);
            let before = trainer.step(&code, &doc).unwrap();
            let after = trainer.model.batch_loss(&code, &doc, &cfg.loss).unwrap();
            improved += usize::from(after <= before);
            steps += 1;
        }
    }
    assert!(improved * 10 >= steps * 9, "{improved}/{steps}");
}

#[test]
fn epoch_batches_follow_rotation() {
    let splits = generate(&SyntheticConfig {
        train_pairs: 64,
        heldout_pairs: 1,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        hidden: 8,
        ..Default::default()
    };
    let out = train(&splits.train, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    let first = &out.history[0].language_order;
    let second = &out.history[1].language_order;
    assert_eq!(second[0], first[first.len() - 1]);
    assert_eq!(&second[1..], &first[..first.len() - 1]);
    for h in &out.history {
        assert_eq!(h.per_language.len(), 6);
        assert!(h.mean_loss.is_finite());
    }
}

#[test]
fn same_seed_same_checkpoint_different_seed_differs() {
    let splits = generate(&SyntheticConfig {
        train_pairs: 40,
        heldout_pairs: 1,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        hidden: 8,
        ..Default::default()
    };
    let a = train(&splits.train, &cfg).unwrap();
    let b = train(&splits.train, &cfg).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(&splits.train, &TrainConfig { seed: 7, ..cfg }).unwrap();
    assert_ne!(a.checkpoint.model.params, c.checkpoint.model.params);
}
