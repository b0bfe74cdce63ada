//! Decoder with unified channel adaptation.
//!
//! Every encoder stage is brought to `c_d` channels by a 1×1 conv + ReLU.
//! Fusion is top-down: `D₅ = U₅`, `D_i = relu(conv3×3(up×2(D_{i+1}) + U_i))`.

use rand::Rng;

use crate::backbone::{FeaturePyramid, STAGES};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

pub const DEFAULT_CD: usize = 32;

/// Decoder maps, finest first: `stages[0] = D₁ … stages[4] = D₅`.
#[derive(Clone, Debug)]
pub struct DecoderFeatures<'t, T: Scalar> {
    pub stages: Vec<Var<'t, T>>,
    pub c_d: usize,
}

impl<'t, T: Scalar> DecoderFeatures<'t, T> {
    /// `D_i` for stage `i ∈ 1..=5`.
    pub fn stage(&self, i: usize) -> &Var<'t, T> {
        &self.stages[i - 1]
    }
}

pub fn init<T: Scalar>(channels: &[usize; STAGES], c_d: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    for (i, &c) in channels.iter().enumerate() {
        store.add_conv(&format!("uca.stage{}", i + 1), c, c_d, 1, rng);
    }
    for i in 1..STAGES {
        store.add_conv(&format!("decoder.fuse{i}"), c_d, c_d, 3, rng);
    }
}

/// 1×1 conv + ReLU per stage, to `c_d` channels.
pub fn unify_channels<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    pyramid: &FeaturePyramid<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    pyramid
        .stages
        .iter()
        .enumerate()
        .map(|(i, f)| store.conv(tape, &format!("uca.stage{}", i + 1), f, 1, 0)?.relu())
        .collect()
}

/// Top-down fusion of the unified maps (finest first).
pub fn decode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    unified: &[Var<'t, T>],
) -> Result<DecoderFeatures<'t, T>> {
    if unified.len() != STAGES {
        return Err(Error::shape("decode", format!("expected {STAGES} stages, got {}", unified.len())));
    }
    let c_d = unified[0].shape()[1];
    let mut stages = vec![unified[STAGES - 1]];
    for i in (1..STAGES).rev() {
        let up = stages.last().unwrap().upsample_bilinear(2)?;
        let skip = &unified[i - 1];
        if up.shape() != skip.shape() {
            return Err(Error::shape(
                "decode",
                format!("stage {i}: upsampled {:?} vs unified {:?}", up.shape(), skip.shape()),
            ));
        }
        let fused = store.conv(tape, &format!("decoder.fuse{i}"), &up.add(skip)?, 1, 1)?.relu()?;
        stages.push(fused);
    }
    stages.reverse();
    Ok(DecoderFeatures { stages, c_d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_fusion_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 3;
        let mut store = ParamStore::<f64>::new();
        store.add_conv("decoder.fuse1", c, c, 3, &mut rng);
        let coarse = Tensor::<f64>::uniform([1, c, 2, 2], -1.0, 1.0, &mut rng);
        let fine = Tensor::<f64>::uniform([1, c, 4, 4], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let up = tape.constant(coarse.clone()).upsample_bilinear(2).unwrap();
        let sum = up.add(&tape.constant(fine.clone())).unwrap();
        let got = store.conv(&tape, "decoder.fuse1", &sum, 1, 1).unwrap().relu().unwrap().value();

        let up = oracle::resize_bilinear(&coarse.to_f64(), c, 2, 2, 4, 4);
        let sum: Vec<f64> = up.iter().zip(fine.to_f64()).map(|(a, b)| a + b).collect();
        let w = store.get("decoder.fuse1.weight").unwrap().to_f64();
        let b = store.get("decoder.fuse1.bias").unwrap().to_f64();
        let want: Vec<f64> = oracle::conv2d(&sum, (1, c, 4, 4), &w, (c, 3, 3), Some(&b), 1, 1)
            .into_iter()
            .map(oracle::relu)
            .collect();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let mut store = ParamStore::<f32>::new();
        let channels = [4, 4, 4, 4, 4];
        init(&channels, 8, &mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let unified: Vec<_> = (0..5)
            .map(|i| tape.constant(Tensor::zeros([1, 8, 32 >> i, 32 >> i])))
            .collect();
        let dec = decode(&tape, &store, &unified).unwrap();
        for (i, d) in dec.stages.iter().enumerate() {
            assert_eq!(d.shape(), vec![1, 8, 32 >> i, 32 >> i]);
            assert!(d.value().data().iter().all(|v| *v == 0.0));
        }
    }
}
