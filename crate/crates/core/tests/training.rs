use texstat::checkpoint;
use texstat::data::{self, SynthParams};
use texstat::metrics::GeMode;
use texstat::train::{self, evaluate};
use texstat::{Model, ModelConfig, TrainConfig};

#[test]
fn every_parameter_receives_gradient() {
    let model = Model::<f32>::build(&ModelConfig::toy()).unwrap();
    let s = &data::synth(&SynthParams {
        count: 1,
        ..Default::default()
    })
    .unwrap()[0];
    let (loss, grads) = model.loss_and_grads(&s.image, &s.mask).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for ((name, _), g) in model.params.iter().zip(&grads) {
        assert!(g.is_some(), "{name} has no gradient");
    }
    for name in [
        "enc0.conv1.weight",
        "stft.alpha",
        "stet.kv_proj.weight",
        "head.weight",
    ] {
        let i = model
            .params
            .names()
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("{name}"));
        let g = grads[i].as_ref().unwrap();
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{name} gradient is identically zero"
        );
    }
}

#[test]
fn early_overfit_loss_mostly_decreases() {
    let samples = data::synth(&SynthParams::default()).unwrap();
    let mut model = Model::<f32>::build(&ModelConfig::toy()).unwrap();
    let cfg = TrainConfig {
        epochs: 11,
        ..TrainConfig::desk()
    };
    let outcome = train::train(&mut model, &samples, &[], &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = outcome.trace.iter().map(|r| r.loss).collect();
    let steps = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(
        steps >= 8,
        "loss decreased in only {steps} of 10 epochs: {losses:?}"
    );
}

#[test]
fn best_checkpoint_reproduces_selection_dice() {
    let samples = data::synth(&SynthParams {
        count: 6,
        size: 32,
        ..Default::default()
    })
    .unwrap();
    let split = data::split(&samples, [4.0 / 6.0, 2.0 / 6.0, 0.0], 1).unwrap();
    let config = ModelConfig {
        height: 32,
        width: 32,
        ..ModelConfig::toy()
    };
    let mut model = Model::<f32>::build(&config).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::desk()
    };
    let outcome = train::train(&mut model, &split.train, &split.val, &cfg, |_| {}).unwrap();
    assert_eq!(
        outcome.trace[outcome.best_epoch].val_dice,
        outcome.best_val_dice
    );

    model.params = outcome.best;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let reloaded = checkpoint::load::<f32>(&path).unwrap();
    let dice = evaluate(&reloaded, &split.val, cfg.threshold, GeMode::Arithmetic)
        .unwrap()
        .mean_dice();
    assert_eq!(dice, outcome.best_val_dice);
}
