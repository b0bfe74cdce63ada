//! Five-stage residual encoder producing the feature pyramid.
//!
//! Stage `i` halves the resolution with a stride-2 3×3 conv + ReLU, then
//! applies `blocks_per_stage` residual blocks
//! (`relu(x + conv(relu(conv(x))))`). Cumulative strides are 2, 4, 8, 16, 32.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

pub const STAGES: usize = 5;
pub const STRIDES: [usize; STAGES] = [2, 4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: [usize; STAGES],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: [16, 24, 32, 48, 64], blocks_per_stage: 2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::shape("backbone", "zero channel count"));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::shape("backbone", format!("channels {:?} must be nondecreasing", self.channels)));
        }
        Ok(())
    }
}

/// Encoder outputs `F₁…F₅`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub stages: Vec<Var<'t, T>>,
    pub channels: [usize; STAGES],
    pub strides: [usize; STAGES],
}

pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    if height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0 {
        return Err(Error::InputSize { height, width });
    }
    Ok(())
}

pub fn init<T: Scalar>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    let mut c_in = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let s = i + 1;
        store.add_conv(&format!("encoder.stage{s}.down"), c_in, c, 3, rng);
        for b in 1..=cfg.blocks_per_stage {
            store.add_conv(&format!("encoder.stage{s}.block{b}.conv1"), c, c, 3, rng);
            store.add_conv(&format!("encoder.stage{s}.block{b}.conv2"), c, c, 3, rng);
        }
        c_in = c;
    }
}

/// Runs the encoder on `image: [N,3,H,W]`.
pub fn encode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    image: &Var<'t, T>,
) -> Result<FeaturePyramid<'t, T>> {
    let shape = image.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("encode", format!("expected [N,3,H,W], got {shape:?}")));
    }
    check_input_size(shape[2], shape[3])?;
    let mut x = *image;
    let mut stages = Vec::with_capacity(STAGES);
    for s in 1..=STAGES {
        x = store.conv(tape, &format!("encoder.stage{s}.down"), &x, 2, 1)?.relu()?;
        for b in 1..=cfg.blocks_per_stage {
            let p = format!("encoder.stage{s}.block{b}");
            let h = store.conv(tape, &format!("{p}.conv1"), &x, 1, 1)?.relu()?;
            let h = store.conv(tape, &format!("{p}.conv2"), &h, 1, 1)?;
            x = x.add(&h)?.relu()?;
        }
        stages.push(x);
    }
    Ok(FeaturePyramid { stages, channels: cfg.channels, strides: STRIDES })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &BackboneConfig) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        init(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
        store
    }

    #[test]
    fn stage_shapes_for_64() {
        let cfg = BackboneConfig::default();
        let store = setup(&cfg);
        let tape = Tape::new();
        let img = tape.constant(Tensor::zeros([1, 3, 64, 64]));
        let pyr = encode(&tape, &store, &cfg, &img).unwrap();
        assert_eq!(pyr.stages[4].shape(), vec![1, 64, 2, 2]);
        assert_eq!(pyr.stages[0].shape(), vec![1, 16, 32, 32]);
        for s in &pyr.stages {
            assert!(s.value().is_finite());
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = BackboneConfig::default();
        let store = setup(&cfg);
        let tape = Tape::new();
        let img = tape.constant(Tensor::zeros([1, 3, 48, 64]));
        assert!(matches!(encode(&tape, &store, &cfg, &img), Err(Error::InputSize { .. })));
    }

    #[test]
    fn rejects_decreasing_channels() {
        let cfg = BackboneConfig { channels: [16, 8, 32, 48, 64], blocks_per_stage: 2 };
        assert!(cfg.validate().is_err());
    }
}
