//! Encoder attention: one global context vector from all encoder stages.
//!
//! Each stage map is pooled to a vector and projected to a common token
//! width `d_model`; the five tokens attend to each other through a single
//! head, and the attended tokens are averaged into `G`.

use rand::Rng;

use crate::backbone::{FeaturePyramid, STAGES};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{kaiming_uniform, Tape, Var};

#[derive(Clone, Debug)]
pub struct GlobalContext<'t, T: Scalar> {
    /// `[N, d_model]`
    pub g: Var<'t, T>,
    /// `[N, 5, 5]` attention weights, absent when attention is disabled.
    pub attention: Option<Var<'t, T>>,
}

pub fn init<T: Scalar>(channels: &[usize; STAGES], d_model: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    for (i, &c) in channels.iter().enumerate() {
        store.add_linear(&format!("ea.proj{}", i + 1), c, d_model, rng);
    }
    for name in ["query", "key", "value"] {
        store.insert(format!("ea.{name}.weight"), kaiming_uniform([d_model, d_model], d_model, rng));
    }
}

/// Parameters for the ablation that takes `G` from the deepest stage alone.
/// A projection is only needed when `C₅ ≠ d_model`.
pub fn init_deepest_only<T: Scalar>(c5: usize, d_model: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    if c5 != d_model {
        store.add_linear("context.proj", c5, d_model, rng);
    }
}

/// Global average pool of every stage: `[N, C_i]` each.
pub fn pool_stages<'t, T: Scalar>(pyramid: &FeaturePyramid<'t, T>) -> Result<Vec<Var<'t, T>>> {
    pyramid.stages.iter().map(|s| s.global_avg_pool()).collect()
}

/// `softmax(Q·Kᵀ/√d_k)·V` over `[B, L, d]` sequences. Returns
/// `(attended [B,L,d_v], weights [B,L,L])`.
pub fn scaled_dot_attention<'t, T: Scalar>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d_k = *q.shape().last().ok_or_else(|| Error::shape("attention", "rank-0 query"))?;
    let logits = q.bmm(k, true)?.scale(1.0 / (d_k as f64).sqrt())?;
    let weights = logits.softmax_rows()?;
    Ok((weights.bmm(v, false)?, weights))
}

pub fn encoder_attention<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    d_model: usize,
    pooled: &[Var<'t, T>],
) -> Result<GlobalContext<'t, T>> {
    if pooled.len() != STAGES {
        return Err(Error::shape("encoder_attention", format!("expected {STAGES} stages, got {}", pooled.len())));
    }
    let n = pooled[0].shape()[0];
    let mut tokens = Vec::with_capacity(STAGES);
    for (i, p) in pooled.iter().enumerate() {
        let expected = store.get(&format!("ea.proj{}.weight", i + 1))?.shape()[0];
        let s = p.shape();
        if s != [n, expected] {
            return Err(Error::shape("encoder_attention", format!("stage {} pooled {s:?}, expected [{n}, {expected}]", i + 1)));
        }
        let t = store.linear(tape, &format!("ea.proj{}", i + 1), p)?;
        tokens.push(t.reshape([n, 1, d_model])?);
    }
    let seq = tape.concat(&tokens, 1)?;
    let flat = seq.reshape([n * STAGES, d_model])?;
    let project = |name: &str| -> Result<Var<'t, T>> {
        flat.matmul(&store.var(tape, &format!("ea.{name}.weight"))?)?
            .reshape([n, STAGES, d_model])
    };
    let (q, k, v) = (project("query")?, project("key")?, project("value")?);
    let (attended, weights) = scaled_dot_attention(&q, &k, &v)?;
    Ok(GlobalContext { g: attended.mean_axis(1)?, attention: Some(weights) })
}

/// Ablation context: pooled deepest stage only.
pub fn deepest_stage_context<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    pyramid: &FeaturePyramid<'t, T>,
) -> Result<GlobalContext<'t, T>> {
    let pooled = pyramid.stages[STAGES - 1].global_avg_pool()?;
    let g = if store.contains("context.proj.weight") {
        store.linear(tape, "context.proj", &pooled)?
    } else {
        pooled
    };
    Ok(GlobalContext { g, attention: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_query_gives_uniform_weights_and_mean_of_values() {
        let d = 4;
        let channels = [2, 3, 4, 5, 6];
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init(&channels, d, &mut store, &mut rng);
        store.insert("ea.query.weight", Tensor::zeros([d, d]));
        let tape = Tape::new();
        let pooled: Vec<_> = channels
            .iter()
            .map(|&c| tape.constant(Tensor::uniform([1, c], -1.0, 1.0, &mut rng)))
            .collect();
        let ctx = encoder_attention(&tape, &store, d, &pooled).unwrap();
        for w in ctx.attention.unwrap().value().data() {
            assert!((w - 0.2).abs() < 1e-12);
        }
        // G = mean over tokens of the value rows
        let wv = store.get("ea.value.weight").unwrap().to_f64();
        let mut want = vec![0.0; d];
        for (i, p) in pooled.iter().enumerate() {
            let pre = format!("ea.proj{}", i + 1);
            let tok = oracle::linear(
                &p.value().to_f64(),
                &store.get(&format!("{pre}.weight")).unwrap().to_f64(),
                &store.get(&format!("{pre}.bias")).unwrap().to_f64(),
                1,
                channels[i],
                d,
            );
            for (w, v) in want.iter_mut().zip(oracle::matmul(&tok, &wv, 1, d, d)) {
                *w += v / 5.0;
            }
        }
        for (g, w) in ctx.g.value().data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_stage_count_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        init(&[1; 5], 2, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let pooled = vec![tape.constant(Tensor::zeros([1, 1])); 4];
        assert!(encoder_attention(&tape, &store, 2, &pooled).is_err());
    }
}
