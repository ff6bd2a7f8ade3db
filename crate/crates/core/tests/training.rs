use ultralbm::data::{generate_synthetic, split_dataset, SynthSpec};
use ultralbm::network::{Model, ModelConfig};
use ultralbm::training::{train, TrainConfig};

#[test]
fn one_epoch_on_eight_samples() {
    let data = generate_synthetic(&SynthSpec {
        count: 10,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut m = Model::new(&ModelConfig::full(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &data[..8], &data[8..], &cfg, |_| {}).unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.history[0].train_loss.is_finite());
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn loss_falls_over_twenty_epochs() {
    let data = generate_synthetic(&SynthSpec {
        count: 40,
        ..SynthSpec::default()
    })
    .unwrap();
    let (tr, va) = split_dataset(&data, 0.8, 0).unwrap();
    let mut m = Model::new(&ModelConfig::tiny(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &tr, &va, &cfg, |_| {}).unwrap();
    let (first, last) = (out.history[0].train_loss, out.history[19].train_loss);
    assert!(last < first, "{first} -> {last}");
    assert!(out.best_val_iou >= out.history[0].val_iou);
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}
