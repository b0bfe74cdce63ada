//! Seeded training loop, evaluation and run artefacts.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::check_input_size;
use crate::data::augment::{augment, AugmentConfig};
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{aggregate, binarize, confusion, Aggregation, ConfusionCounts};
use crate::model::{ModelConfig, SegModel};
use crate::optim::{OptimState, SgdConfig};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: SgdConfig,
    pub batch_size: usize,
    pub image_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Fraction of a single dataset directory used for training.
    pub train_frac: f64,
}

impl Default for TrainConfig {
    /// Desk scale: 64×64 inputs, batch 8, 30 epochs.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: SgdConfig::default(),
            batch_size: 8,
            image_size: 64,
            epochs: 30,
            seed: 42,
            augment: AugmentConfig::default(),
            train_frac: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_input_size(self.image_size, self.image_size)?;
        if self.batch_size == 0 {
            return Err(Error::Config { line: 0, reason: "batch_size must be positive".into() });
        }
        if !(self.optim.lr0.is_finite() && self.optim.lr0 >= 0.0) {
            return Err(Error::Config { line: 0, reason: "lr0 must be a non-negative number".into() });
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Independent RNG streams derived from the run seed.
#[derive(Clone, Copy)]
enum Stream {
    Shuffle = 1,
    Augment = 2,
}

fn stream_rng(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: f64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,train_loss,val_dice";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{:.6},{:.6}", self.epoch, self.step, self.lr, self.train_loss, self.val_dice)
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        writeln!(s, "{}", e.csv_row()).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the highest validation Dice.
    pub best: SegModel<f32>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub last: SegModel<f32>,
    pub log: Vec<EpochLog>,
    /// Batch loss of every update, in order.
    pub step_losses: Vec<f64>,
}

fn prepare(samples: &[Sample<f32>], size: usize) -> Vec<Sample<f32>> {
    samples.iter().map(|s| s.resized(size, size)).collect()
}

/// Trains on `train`, selecting the best epoch on `val`. `on_epoch` sees each
/// log row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample<f32>],
    val: &[Sample<f32>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let train = prepare(train, cfg.image_size);
    let val = prepare(val, cfg.image_size);

    let mut model = SegModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let steps_per_epoch = cfg.steps_per_epoch(train.len());
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let mut opt = OptimState::new(cfg.optim.clone(), &model.params, total_steps);
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment);

    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut lr) = (0.0, opt.schedule.lr(step));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<f32>> = chunk.iter().map(|&i| augment(&train[i], &cfg.augment, &mut aug_rng)).collect();
            let (images, masks) = data::batch(&batch.iter().collect::<Vec<_>>())?;
            let tape = Tape::new();
            let x = tape.constant(images);
            let out = model.forward(&tape, &x)?;
            let loss = total_loss(&out.head.predictions, &masks)?;
            let value = loss.value().data()[0] as f64;
            let grads = tape.backward(loss)?;
            lr = opt.step(&mut model.params, &grads, step)?;
            step += 1;
            loss_sum += value;
            step_losses.push(value);
        }
        let val_dice = if val.is_empty() {
            f64::NAN
        } else {
            aggregate(&evaluate(&model, &val, cfg.batch_size)?, Aggregation::PerImage).dice
        };
        let row = EpochLog { epoch, step, lr, train_loss: loss_sum / steps_per_epoch as f64, val_dice };
        on_epoch(&row);
        log.push(row);
        // NaN (no validation set) never compares greater, so keep the latest
        if val_dice > best.2 || val.is_empty() {
            best = (model.clone(), epoch, val_dice);
        }
    }
    let (best, best_epoch, best_val_dice) = best;
    Ok(TrainOutcome { best, best_epoch, best_val_dice, last: model, log, step_losses })
}

/// Per-image confusion counts of the thresholded full-resolution prediction.
pub fn evaluate(model: &SegModel<f32>, samples: &[Sample<f32>], batch_size: usize) -> Result<Vec<ConfusionCounts>> {
    let mut counts = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, _) = data::batch(&chunk.iter().collect::<Vec<_>>())?;
        let logits = model.predict_logits(&images)?;
        let plane = logits.numel() / chunk.len();
        let pred = binarize(&logits, 0.0);
        for (i, s) in chunk.iter().enumerate() {
            let truth: Vec<bool> = s.mask.data().iter().map(|v| *v > 0.5).collect();
            counts.push(confusion(&pred[i * plane..(i + 1) * plane], &truth)?);
        }
    }
    Ok(counts)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.dksg";
pub const LOG_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Loads `data_dir`, splits it, trains and writes the best checkpoint, the
/// metrics log and the resolved config into `out_dir`.
pub fn run_training(
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = data::load_dataset::<f32>(data_dir)?;
    let (train_set, val_set) = data::split(&samples, cfg.train_frac, cfg.seed);
    let outcome = train(cfg, &train_set, &val_set, on_epoch)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    outcome.best.save(&out_dir.join(CHECKPOINT_FILE))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(LOG_FILE, log_csv(&outcome.log))?;
    write(CONFIG_FILE, cfg.to_string())?;
    Ok(outcome)
}
