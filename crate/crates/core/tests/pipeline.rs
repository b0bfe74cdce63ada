use dksg::backbone::BackboneConfig;
use dksg::data::synth::{generate_synthetic, synth_dataset, synth_sample, SyntheticSpec};
use dksg::data::{self, load_dataset};
use dksg::model::{ContextSource, ModelConfig, SegModel};
use dksg::selftest;
use dksg::train::{run_training, train, TrainConfig, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE};
use dksg::{Sample32, Tape};

fn tiny() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            backbone: BackboneConfig { channels: [4, 6, 8, 8, 8], blocks_per_stage: 1 },
            d_model: 8,
            c_d: 8,
            ..ModelConfig::default()
        },
        batch_size: 4,
        image_size: 32,
        epochs: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn every_selftest_check_passes() {
    let failed: Vec<String> = selftest::run_all(11).into_iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn run_artifacts_reload() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { count: 10, image_size: 32, seed: 4, ..SyntheticSpec::default() };
    generate_synthetic(&spec, &dir.path().join("data")).unwrap();
    let cfg = tiny();
    let out = run_training(&cfg, &dir.path().join("data"), &dir.path().join("run"), |_| {}).unwrap();

    let text = std::fs::read_to_string(dir.path().join("run").join(CONFIG_FILE)).unwrap();
    assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
    let log = std::fs::read_to_string(dir.path().join("run").join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), cfg.epochs + 1);

    let loaded = SegModel::<f32>::load(&dir.path().join("run").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.config, cfg.model);
    let samples: Vec<Sample32> = load_dataset(&dir.path().join("data")).unwrap();
    let (images, _) = data::batch(&samples.iter().take(2).collect::<Vec<_>>()).unwrap();
    assert_eq!(loaded.predict_logits(&images).unwrap(), out.best.predict_logits(&images).unwrap());
}

#[test]
fn training_lowers_the_loss() {
    let all = synth_dataset(&SyntheticSpec { count: 24, image_size: 32, seed: 8, ..SyntheticSpec::default() });
    // a larger step so a handful of epochs on 20 images moves the loss
    let mut cfg = TrainConfig { epochs: 8, ..tiny() };
    cfg.optim.lr0 = 0.02;
    let out = train(&cfg, &all[..20], &all[20..], |_| {}).unwrap();
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(out.log.iter().all(|e| e.val_dice.is_finite()));
}

#[test]
fn deepest_stage_ablation_runs_and_has_no_attention() {
    let cfg = ModelConfig { context: ContextSource::DeepestStage, ..ModelConfig::default() };
    let model = SegModel::<f32>::new(cfg, 1).unwrap();
    assert!(model.params.iter().all(|(n, _)| !n.starts_with("ea.") && !n.starts_with("context.")));
    let full = SegModel::<f32>::new(ModelConfig::default(), 1).unwrap();
    assert!(full.params.num_scalars() > model.params.num_scalars());

    let s = synth_sample(&SyntheticSpec::default(), 0).sample;
    let tape = Tape::new();
    let x = tape.constant(s.image.reshape([1, 3, 64, 64]).unwrap());
    let out = model.forward(&tape, &x).unwrap();
    assert!(out.context.attention.is_none());
    assert_eq!(out.head.predictions.len(), 5);

    // a context narrower than d_model gets a projection
    let narrow = ModelConfig {
        backbone: BackboneConfig { channels: [8, 8, 8, 8, 16], blocks_per_stage: 1 },
        context: ContextSource::DeepestStage,
        ..ModelConfig::default()
    };
    let m = SegModel::<f32>::new(narrow.clone(), 1).unwrap();
    assert!(m.params.contains("context.proj.weight"));
    assert_eq!(ModelConfig::infer(&m.params).unwrap(), narrow);
}

#[test]
fn probabilities_stay_in_the_open_interval() {
    let model = SegModel::<f32>::new(ModelConfig::default(), 2).unwrap();
    let s = synth_sample(&SyntheticSpec::default(), 1).sample;
    let p = model.predict_proba(&s.image.reshape([1, 3, 64, 64]).unwrap()).unwrap();
    assert_eq!(p.shape(), &[1, 1, 64, 64]);
    assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}
