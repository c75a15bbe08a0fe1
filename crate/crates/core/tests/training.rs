use proptest::prelude::*;

use primal_attention::features::{FeatureKind, FeatureMapConfig};
use primal_attention::model::{
    gradient_check, AttentionKind, GradCheckOptions, ModeConfig, Model, ModelConfig, ModelShape,
};
use primal_attention::optim::OptimizerConfig;
use primal_attention::task::{make_task, Example, Input, TaskKind, TaskSpec};
use primal_attention::train::{train, TrainConfig, Trainer};
use primal_attention::Error;

fn small_task(kind: TaskKind) -> TaskSpec {
    TaskSpec {
        task: kind,
        seq_len: 6,
        vocab: 5,
        train_size: 48,
        test_size: 12,
        ..TaskSpec::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        head_dim: 6,
        s: 3,
        d_v: 4,
        mode: ModeConfig::DataDependent { rank_multi: 1 },
        ..ModelConfig::default()
    }
}

fn short_run(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        log_every: 1,
        optimizer: OptimizerConfig::Adam {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn gradients_certified_for_every_configuration() {
    let spec = small_task(TaskKind::MajorityToken { classes: 2 });
    let data = make_task(&spec).unwrap();
    let batch: Vec<&Example> = data.examples.iter().take(2).collect();
    let opts = GradCheckOptions {
        coords_per_tensor: 12,
        ..GradCheckOptions::default()
    };
    for causal in [false, true] {
        for mode in [ModeConfig::DataIndependent, ModeConfig::DataDependent { rank_multi: 1 }] {
            for kind in [
                FeatureKind::Cosine,
                FeatureKind::Identity,
                FeatureKind::RandomExponential,
            ] {
                let cfg = ModelConfig {
                    causal,
                    mode,
                    heads: 2,
                    layers: 2,
                    kinds: vec![AttentionKind::Canonical, AttentionKind::Primal],
                    eta: 0.2,
                    feature_map: FeatureMapConfig {
                        kind,
                        ..FeatureMapConfig::default()
                    },
                    ..small_model()
                };
                let model = Model::new(cfg, ModelShape::for_task(&spec)).unwrap();
                for c in gradient_check(&model, &batch, &opts).unwrap() {
                    assert!(c.checked > 0 && c.passed(1e-4), "{causal} {mode:?} {kind:?}: {c:?}");
                }
            }
        }
    }
}

#[test]
fn regression_gradients_certified() {
    let spec = small_task(TaskKind::LowRankRegression {
        target_rank: 2,
        input_dim: 3,
        output_dim: 2,
    });
    let data = make_task(&spec).unwrap();
    let batch: Vec<&Example> = data.examples.iter().take(3).collect();
    let model = Model::new(small_model(), ModelShape::for_task(&spec)).unwrap();
    for c in gradient_check(&model, &batch, &GradCheckOptions::default()).unwrap() {
        assert!(c.passed(1e-4), "{c:?}");
    }
}

#[test]
fn causal_model_never_leaks_after_training() {
    let spec = small_task(TaskKind::CopyFirst);
    let data = make_task(&spec).unwrap();
    for kinds in [
        vec![AttentionKind::Primal],
        vec![AttentionKind::Canonical, AttentionKind::Primal],
    ] {
        for mode in [ModeConfig::DataIndependent, ModeConfig::DataDependent { rank_multi: 1 }] {
            let cfg = ModelConfig {
                causal: true,
                layers: kinds.len(),
                kinds: kinds.clone(),
                mode,
                feature_map: FeatureMapConfig {
                    kind: FeatureKind::RandomExponential,
                    ..FeatureMapConfig::default()
                },
                ..small_model()
            };
            let model = Model::new(cfg, ModelShape::for_task(&spec)).unwrap();
            let (model, _) = train(model, data.clone(), short_run(20)).unwrap();
            for ex in data.examples.iter().take(4) {
                let full = model.token_outputs(&ex.input).unwrap();
                for n in 1..=ex.input.len() {
                    let part = model.token_outputs(&ex.input.prefix(n).unwrap()).unwrap();
                    for i in 0..n {
                        assert_eq!(part.row(i), full.row(i), "prefix {n} row {i}");
                    }
                }
                let last = model.predict(&ex.input.prefix(3).unwrap()).unwrap();
                assert_eq!(last.as_slice(), full.row(2));
            }
        }
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let spec = small_task(TaskKind::MajorityToken { classes: 2 });
    let data = make_task(&spec).unwrap();
    let run = |seed: u64| {
        let cfg = ModelConfig { seed, ..small_model() };
        let model = Model::new(cfg, ModelShape::for_task(&spec)).unwrap();
        let (_, log) = train(model, data.clone(), TrainConfig { seed, ..short_run(15) }).unwrap();
        log
    };
    let a = run(3);
    assert_eq!(a.to_csv(), run(3).to_csv());
    assert_ne!(a.to_csv(), run(4).to_csv());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let spec = small_task(TaskKind::MajorityToken { classes: 2 });
    let data = make_task(&spec).unwrap();
    let model = Model::new(small_model(), ModelShape::for_task(&spec)).unwrap();
    for optimizer in [
        OptimizerConfig::Sgd { lr: 0.0 },
        OptimizerConfig::Adam {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    ] {
        let config = TrainConfig {
            optimizer,
            batch_size: 64,
            ..short_run(5)
        };
        let (after, log) = train(model.clone(), data.clone(), config).unwrap();
        assert_eq!(after.params, model.params);
        assert!(log.rows.windows(2).all(|w| w[0].total == w[1].total));
    }
}

#[test]
fn regularized_run_reduces_j() {
    let spec = TaskSpec {
        train_size: 200,
        test_size: 20,
        ..TaskSpec::default()
    };
    let data = make_task(&spec).unwrap();
    let model = Model::new(ModelConfig::default(), ModelShape::for_task(&spec)).unwrap();
    let config = TrainConfig {
        steps: 150,
        log_every: 1,
        ..TrainConfig::default()
    };
    let (_, log) = train(model, data, config).unwrap();
    let first = &log.rows[0].per_layer_j;
    let last = &log.rows.last().unwrap().per_layer_j;
    for (a, b) in first.iter().zip(last) {
        assert!(b.abs() <= a.abs(), "{first:?} -> {last:?}");
    }
}

#[test]
fn resumed_trainer_matches_uninterrupted() {
    let spec = small_task(TaskKind::MajorityToken { classes: 2 });
    let data = make_task(&spec).unwrap();
    let model = Model::new(small_model(), ModelShape::for_task(&spec)).unwrap();
    let mut whole = Trainer::new(model.clone(), data.clone(), short_run(10)).unwrap();
    let full = whole.run().unwrap();
    let mut first = Trainer::new(model, data.clone(), short_run(4)).unwrap();
    first.run().unwrap();
    let mut second = Trainer::new(first.model.clone(), data, short_run(10)).unwrap();
    second.optimizer.state = first.optimizer.state.clone();
    let rest = second.run().unwrap();
    assert_eq!(rest.rows, full.rows[4..]);
    assert_eq!(second.model.params, whole.model.params);
}

#[test]
fn subsample_is_fixed_per_head() {
    let spec = small_task(TaskKind::MajorityToken { classes: 2 });
    let cfg = ModelConfig {
        heads: 2,
        ..small_model()
    };
    let a = cfg.projection_mode(0, 0);
    assert_eq!(a, cfg.projection_mode(0, 0));
    assert_ne!(a, cfg.projection_mode(0, 1));
    let model = Model::new(cfg, ModelShape::for_task(&spec)).unwrap();
    let input = Input::Tokens(vec![0, 1, 2, 3, 4, 0]);
    assert_eq!(model.predict(&input).unwrap(), model.predict(&input).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn lambda_stays_positive(lr in 1e-3f64..10.0, steps in 1u64..15, seed in any::<u64>()) {
        let spec = small_task(TaskKind::MajorityToken { classes: 2 });
        let data = make_task(&spec).unwrap();
        let cfg = ModelConfig { seed, eta: 1.0, ..small_model() };
        let model = Model::new(cfg, ModelShape::for_task(&spec)).unwrap();
        let mut trainer = Trainer::new(model, data, TrainConfig {
            optimizer: OptimizerConfig::Sgd { lr },
            ..short_run(steps)
        }).unwrap();
        // Large learning rates may diverge or push Λ out of range; a run that
        // completes must leave Λ finite and positive.
        match trainer.run() {
            Ok(_) => {
                let lambda = trainer.model.head_params(0, 0).unwrap().lambda();
                prop_assert!(lambda.iter().all(|&l| l.is_finite() && l > 0.0), "{lambda:?}");
            }
            Err(f) => prop_assert!(
                matches!(f.error, Error::Divergence { .. } | Error::NonFinite(_)),
                "{:?}",
                f.error
            ),
        }
    }
}
