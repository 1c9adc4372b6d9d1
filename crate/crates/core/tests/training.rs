use lprnet::arch::FeatureShape;
use lprnet::experiments::{ablation_train_config, synthetic_task, toy_network, AblationVariant};
use lprnet::train::{batch_stat_loss, train, FineTune, OptimizerChoice, TrainConfig};
use lprnet::weights::WeightsFile;

const INPUT: FeatureShape = FeatureShape::new(1, 16, 16);

#[test]
fn lpr_network_loss_falls_below_quarter_of_initial() {
    let (data, _) = synthetic_task(400, 10, 1).unwrap();
    let mut net = toy_network(AblationVariant::Full, INPUT, 10, 1).unwrap();
    let cfg = ablation_train_config(30, 1);
    let initial = batch_stat_loss(&mut net, &data, 32).unwrap();
    let history = train(&mut net, &data, None, &cfg, |_| {}).unwrap();
    let last = history.last().unwrap();
    assert_eq!(history.len(), 30);
    assert!(
        last.train_loss < 0.25 * initial,
        "initial {initial}, final epoch {}",
        last.train_loss
    );
    let after = batch_stat_loss(&mut net, &data, 32).unwrap();
    assert!(after < 0.25 * initial, "initial {initial}, after {after}");
}

fn trained_weights(cfg: &TrainConfig) -> (Vec<u8>, String) {
    let (data, eval) = synthetic_task(96, 32, 2).unwrap();
    let mut net = toy_network(AblationVariant::Full, INPUT, 10, 5).unwrap();
    let mut log = String::new();
    train(&mut net, &data, Some(&eval), cfg, |e| {
        log.push_str(&e.tsv_row());
        log.push('\n');
    })
    .unwrap();
    (WeightsFile::from_network(&net).to_bytes(), log)
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = TrainConfig {
        epochs: 2,
        lr0: 0.05,
        augment: true,
        fine_tune: Some(FineTune {
            epochs: 1,
            lr_scale: 0.1,
        }),
        ..TrainConfig::default()
    };
    let (a, log_a) = trained_weights(&cfg);
    let (b, log_b) = trained_weights(&cfg);
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 3);

    let other = TrainConfig { seed: 1, ..cfg };
    assert_ne!(trained_weights(&other).0, a);
}

#[test]
fn adam_also_trains() {
    let (data, _) = synthetic_task(200, 10, 3).unwrap();
    let mut net = toy_network(AblationVariant::Full, INPUT, 10, 3).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerChoice::Adam,
        lr0: 1e-2,
        epochs: 15,
        ..TrainConfig::default()
    };
    let initial = batch_stat_loss(&mut net, &data, 32).unwrap();
    train(&mut net, &data, None, &cfg, |_| {}).unwrap();
    let after = batch_stat_loss(&mut net, &data, 32).unwrap();
    assert!(after < 0.5 * initial, "initial {initial}, after {after}");
}
