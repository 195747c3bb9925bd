use crisisgraph::corpus::{DataSplit, ProcessedTweet};
use crisisgraph::embedding::{average_vector, lookup_ids, EmbeddingTable};
use crisisgraph::graph::build_graph;
use crisisgraph::model::{accumulate_class_gradient, forward, FilterSpec, ModelConfig, ModelParams, TrainingMode};
use crisisgraph::nn::AdadeltaState;
use crisisgraph::rng::{stream, Stream};
use crisisgraph::sampler::SamplerConfig;
use crisisgraph::trainer::{
    apply_budget, evaluate, label_budget_sweep, train_semisupervised, train_supervised, Budget, MetricsReport,
    TrainConfig,
};
use proptest::prelude::*;
use rand::Rng as _;

const WORDS: usize = 8;

fn table() -> EmbeddingTable {
    let mut rng = stream(99, Stream::Synth);
    let mut rows = Vec::new();
    for class in 0..2 {
        let sign = if class == 0 { 1.0 } else { -1.0 };
        for w in 0..WORDS {
            let v = vec![
                sign + rng.random_range(-0.3..0.3),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            rows.push((format!("c{class}w{w}"), v));
        }
    }
    EmbeddingTable::from_rows(3, rows, 1).unwrap()
}

fn docs(prefix: &str, n: usize, seed: u64, labeled: bool) -> Vec<ProcessedTweet> {
    let mut rng = stream(seed, Stream::Synth);
    (0..n)
        .map(|i| {
            let class = i % 2;
            let tokens = (0..4)
                .map(|_| format!("c{class}w{}", rng.random_range(0..WORDS)))
                .collect();
            ProcessedTweet {
                id: format!("{prefix}{i}"),
                tokens,
                label: labeled.then_some(class),
            }
        })
        .collect()
}

fn config(mode: TrainingMode) -> ModelConfig {
    ModelConfig {
        max_len: 5,
        filters: vec![
            FilterSpec {
                width: 2,
                count: 4,
                pool: 2,
            },
            FilterSpec {
                width: 3,
                count: 4,
                pool: 3,
            },
        ],
        hidden: [8; 4],
        num_classes: 2,
        lambda: 1.0,
        dropout: 0.0,
        mode,
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 50,
        patience: 50,
        batch_size: 4,
        context_samples: Some(40),
        seed,
        ..Default::default()
    }
}

fn split(train: usize, unlabeled: usize) -> DataSplit {
    DataSplit {
        train: docs("l", train, 1, true),
        dev: docs("d", 10, 2, true),
        test: docs("t", 20, 3, true),
    }
    .with_unlabeled(docs("u", unlabeled, 4, false))
    .unwrap()
}

#[test]
fn separable_corpus_is_fit() {
    let mut s = split(20, 0);
    // score early stopping on the training set itself
    s.dev = s.train.clone();
    let cfg = config(TrainingMode::Supervised);
    let out = train_supervised(&s, &table(), &cfg, &train_config(3)).unwrap();
    let train_acc = evaluate(&out.params, &cfg, &table(), &s.train).unwrap();
    assert_eq!(train_acc.weighted_f1, 1.0);
    assert!(out.log.len() <= 50);
}

#[test]
fn frozen_model_stops_after_patience() {
    let s = split(20, 0);
    let cfg = config(TrainingMode::Supervised);
    let tc = TrainConfig {
        lr_class: 0.0,
        patience: 1,
        ..train_config(3)
    };
    let out = train_supervised(&s, &table(), &cfg, &tc).unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.best_epoch, 1);
    assert_eq!(out.log[0].dev_f1, out.log[1].dev_f1);
}

#[test]
fn training_is_deterministic() {
    let s = split(20, 30);
    let vecs: Vec<_> = s.train.iter().map(|d| average_vector(d, &table())).collect();
    let g = build_graph(&vecs, 3).unwrap();
    let cfg = config(TrainingMode::Semi);
    let tc = TrainConfig {
        max_epochs: 5,
        patience: 5,
        ..train_config(8)
    };
    let a = train_semisupervised(&s, &g, &table(), &cfg, &tc, &SamplerConfig::default()).unwrap();
    let b = train_semisupervised(&s, &g, &table(), &cfg, &tc, &SamplerConfig::default()).unwrap();
    assert_eq!(a.log_text(), b.log_text());
    assert_eq!(a.params, b.params);
    assert!(a.log.iter().all(|r| r.context_loss > 0.0));
}

#[test]
fn returns_best_dev_checkpoint() {
    let s = split(20, 0);
    let cfg = config(TrainingMode::Supervised);
    let tc = TrainConfig {
        max_epochs: 12,
        patience: 12,
        ..train_config(5)
    };
    let out = train_supervised(&s, &table(), &cfg, &tc).unwrap();
    let best = out.log.iter().map(|r| r.dev_f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_dev_f1, best);
    assert_eq!(out.log[out.best_epoch - 1].dev_f1, best);
    assert_eq!(evaluate(&out.params, &cfg, &table(), &s.dev).unwrap().weighted_f1, best);
}

#[test]
fn no_context_samples_means_no_context_loss() {
    let s = split(20, 0);
    let vecs: Vec<_> = s.train.iter().map(|d| average_vector(d, &table())).collect();
    let g = build_graph(&vecs, 3).unwrap();
    let tc = TrainConfig {
        max_epochs: 3,
        patience: 3,
        context_samples: Some(0),
        ..train_config(2)
    };
    let out = train_semisupervised(
        &s,
        &g,
        &table(),
        &config(TrainingMode::Semi),
        &tc,
        &SamplerConfig::default(),
    )
    .unwrap();
    assert!(out.log.iter().all(|r| r.context_loss == 0.0));
}

#[test]
fn misaligned_graph_is_rejected() {
    let s = split(20, 5);
    let vecs: Vec<_> = s.train[..10].iter().map(|d| average_vector(d, &table())).collect();
    let g = build_graph(&vecs, 3).unwrap();
    let r = train_semisupervised(
        &s,
        &g,
        &table(),
        &config(TrainingMode::Semi),
        &train_config(1),
        &SamplerConfig::default(),
    );
    assert!(r.is_err());
}

#[test]
fn full_batch_loss_is_non_increasing() {
    let s = split(20, 0);
    let t = table();
    let cfg = config(TrainingMode::Semi);
    let mut params = ModelParams::init(&cfg, 3, 0, &mut stream(4, Stream::Init)).unwrap();
    let mut opt = AdadeltaState::with_lr(0.1).unwrap();
    let ids: Vec<Vec<usize>> = s.train.iter().map(|d| lookup_ids(d, &t, cfg.max_len)).collect();
    let mut prev = f64::INFINITY;
    for _ in 0..15 {
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for (x, d) in ids.iter().zip(&s.train) {
            let trace = forward(x, &t, &params, &cfg, None).unwrap();
            loss += accumulate_class_gradient(&trace, d.label.unwrap(), &params, &cfg, &mut grads, 1.0 / 20.0);
        }
        let loss = loss / 20.0;
        assert!(loss <= prev, "{loss} > {prev}");
        prev = loss;
        let g = grads.tensors();
        opt.step(&mut params.tensors_mut(), &g).unwrap();
    }
}

#[test]
fn budget_masks_labels_stratified() {
    let s = split(40, 10);
    let masked = apply_budget(&s, Budget::Count(6), 2, 11).unwrap();
    let kept: Vec<usize> = masked.train.iter().filter_map(|d| d.label).collect();
    assert_eq!(kept.len(), 6);
    assert_eq!(kept.iter().filter(|&&c| c == 0).count(), 3);
    assert_eq!(masked.train.len(), s.train.len());
    assert_eq!(masked.test, s.test);
    assert_eq!(apply_budget(&s, Budget::All, 2, 11).unwrap().train, s.train);
    assert!(apply_budget(&s, Budget::Count(41), 2, 11).is_err());
}

#[test]
fn budget_all_matches_direct_training() {
    let s = split(20, 10);
    let t = table();
    let vecs: Vec<_> = s.train.iter().map(|d| average_vector(d, &t)).collect();
    let g = build_graph(&vecs, 3).unwrap();
    let tc = TrainConfig {
        max_epochs: 4,
        patience: 4,
        ..train_config(6)
    };
    let sc = SamplerConfig::default();
    let rows = label_budget_sweep(
        &[Budget::Count(10), Budget::All],
        &s,
        &g,
        &t,
        &config(TrainingMode::Semi),
        &tc,
        &sc,
    )
    .unwrap();
    assert_eq!(rows.len(), 4);
    let sup = config(TrainingMode::Supervised);
    let direct = train_supervised(&s, &t, &sup, &tc).unwrap();
    assert_eq!(rows[2].report, evaluate(&direct.params, &sup, &t, &s.test).unwrap());
    let semi = config(TrainingMode::Semi);
    let direct = train_semisupervised(&s, &g, &t, &semi, &tc, &sc).unwrap();
    assert_eq!(rows[3].report, evaluate(&direct.params, &semi, &t, &s.test).unwrap());
}

proptest! {
    #[test]
    fn weighted_equals_macro_with_equal_support(
        per in 1usize..20,
        preds in prop::collection::vec(0usize..3, 60),
    ) {
        let truth: Vec<usize> = (0..3 * per).map(|i| i % 3).collect();
        let predicted = &preds[..truth.len()];
        let r = MetricsReport::from_predictions(&truth, predicted, 3).unwrap();
        let macro_f1 = r.per_class.iter().map(|m| m.f1).sum::<f64>() / 3.0;
        prop_assert!((r.weighted_f1 - macro_f1).abs() <= 1e-12);
        for (c, row) in r.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), r.per_class[c].support);
        }
        for m in &r.per_class {
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}
