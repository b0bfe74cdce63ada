//! Dynamic kernel segmentation head.
//!
//! A per-sample 1×1 kernel `K₅ = φ(G)` predicts `P₅` from `D₅`. Going down
//! the decoder, each stage aggregates its features under the upsampled
//! previous prediction, splits the aggregate into a candidate kernel and a
//! gate input, and blends the candidate with the previous kernel:
//!
//! ```text
//! A_i            = mean_hw( D_i ⊙ σ(up×2(P_{i+1})) )
//! [A_feat, A_gate] = Linear(A_i)
//! g_i            = σ(W_g (A_gate ⊙ K_{i+1}) + b_g)
//! K_i            = g_i ⊙ A_feat + (1 − g_i) ⊙ K_{i+1}
//! P_i            = K_i ⋆ D_i + b_p
//! ```
//!
//! The split and gate layers are shared across stages.

use rand::Rng;

use crate::attention::GlobalContext;
use crate::decoder::DecoderFeatures;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Per-sample kernel `[N, C_d]` and the stage (5…1) it belongs to.
#[derive(Clone, Copy, Debug)]
pub struct DynKernel<'t, T: Scalar> {
    pub k: Var<'t, T>,
    pub stage: usize,
}

/// Logit map `[N, 1, H_i, W_i]`.
#[derive(Clone, Copy, Debug)]
pub struct StagePrediction<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub stage: usize,
}

#[derive(Clone, Debug)]
pub struct HeadOutput<'t, T: Scalar> {
    /// `P₅, P₄, …, P₁`.
    pub predictions: Vec<StagePrediction<'t, T>>,
    /// `K₅, K₄, …, K₁`.
    pub kernels: Vec<DynKernel<'t, T>>,
    /// Gate vectors `g₄ … g₁`, each `[N, C_d]`.
    pub gates: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> HeadOutput<'t, T> {
    /// The finest prediction `P₁`.
    pub fn primary(&self) -> &StagePrediction<'t, T> {
        self.predictions.last().expect("head always yields five predictions")
    }
}

pub fn init<T: Scalar>(d_model: usize, c_d: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    store.add_linear("head.phi1", d_model, d_model, rng);
    store.add_linear("head.phi2", d_model, c_d, rng);
    store.insert("head.pred_bias", Tensor::zeros([1]));
    store.add_linear("head.split", c_d, 2 * c_d, rng);
    store.add_linear("head.gate", c_d, c_d, rng);
}

/// `K₅ = φ(G)` with `φ = linear → relu → linear`.
pub fn init_kernel<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    g: &GlobalContext<'t, T>,
) -> Result<DynKernel<'t, T>> {
    let h = store.linear(tape, "head.phi1", &g.g)?.relu()?;
    let k = store.linear(tape, "head.phi2", &h)?;
    Ok(DynKernel { k, stage: 5 })
}

/// Per-sample 1×1 convolution of `d: [N,C_d,H,W]` with the kernel, plus the
/// shared scalar bias.
pub fn predict<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    kernel: &DynKernel<'t, T>,
    d: &Var<'t, T>,
) -> Result<StagePrediction<'t, T>> {
    let bias = store.var(tape, "head.pred_bias")?;
    let logits = d.channel_dot(&kernel.k)?.add(&bias)?;
    Ok(StagePrediction { logits, stage: kernel.stage })
}

/// Lesion-aware aggregate `A_i: [N, C_d]`.
pub fn assemble<'t, T: Scalar>(d: &Var<'t, T>, prev: &StagePrediction<'t, T>) -> Result<Var<'t, T>> {
    let (ds, ps) = (d.shape(), prev.logits.shape());
    if ds.len() != 4 || ps.len() != 4 || ps[0] != ds[0] || ps[1] != 1 || ps[2] * 2 != ds[2] || ps[3] * 2 != ds[3] {
        return Err(Error::shape("assemble", format!("features {ds:?}, previous prediction {ps:?}")));
    }
    let mask = prev.logits.upsample_bilinear(2)?.sigmoid()?;
    d.mul(&mask)?.global_avg_pool()
}

/// Gated kernel update. Returns the new kernel and its gate vector.
pub fn update_kernel<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    a: &Var<'t, T>,
    prev: &DynKernel<'t, T>,
) -> Result<(DynKernel<'t, T>, Var<'t, T>)> {
    let (sa, sk) = (a.shape(), prev.k.shape());
    if sa != sk || sa.len() != 2 {
        return Err(Error::shape("update_kernel", format!("aggregate {sa:?}, kernel {sk:?}")));
    }
    let c_d = sa[1];
    let split = store.linear(tape, "head.split", a)?;
    let feat = split.slice(1, 0, c_d)?;
    let gate_in = split.slice(1, c_d, c_d)?;
    let gate = store.linear(tape, "head.gate", &gate_in.mul(&prev.k)?)?.sigmoid()?;
    // g·f + (1−g)·k written as k + g·(f − k), so f == k gives k back exactly
    let k = prev.k.add(&gate.mul(&feat.add(&prev.k.scale(-1.0)?)?)?)?;
    Ok((DynKernel { k, stage: prev.stage - 1 }, gate))
}

/// Runs the head over all five decoder stages.
pub fn run_head<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    g: &GlobalContext<'t, T>,
    dec: &DecoderFeatures<'t, T>,
) -> Result<HeadOutput<'t, T>> {
    let mut kernel = init_kernel(tape, store, g)?;
    let mut pred = predict(tape, store, &kernel, dec.stage(5))?;
    let mut out = HeadOutput { predictions: vec![pred], kernels: vec![kernel], gates: Vec::new() };
    for i in (1..=4).rev() {
        let d = dec.stage(i);
        let a = assemble(d, &pred)?;
        let (k, gate) = update_kernel(tape, store, &a, &kernel)?;
        kernel = k;
        pred = predict(tape, store, &kernel, d)?;
        out.kernels.push(kernel);
        out.gates.push(gate);
        out.predictions.push(pred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(c: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init(c, c, &mut s, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn zero_gate_weights_average_feature_and_kernel() {
        let c = 4;
        let mut s = store(c, 5);
        s.insert("head.gate.weight", Tensor::zeros([c, c]));
        s.insert("head.gate.bias", Tensor::zeros([c]));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let a = tape.constant(Tensor::uniform([2, c], -1.0, 1.0, &mut rng));
        let k = DynKernel { k: tape.constant(Tensor::uniform([2, c], -1.0, 1.0, &mut rng)), stage: 5 };
        let (k4, gate) = update_kernel(&tape, &s, &a, &k).unwrap();
        assert_eq!(k4.stage, 4);
        assert!(gate.value().data().iter().all(|g| *g == 0.5));
        let feat = s.linear(&tape, "head.split", &a).unwrap().slice(1, 0, c).unwrap().value();
        for ((out, f), kp) in k4.k.value().data().iter().zip(feat.data()).zip(k.k.value().data()) {
            assert!((out - (0.5 * f + 0.5 * kp)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_kernel_selects_channel() {
        let c = 3;
        let s = store(c, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Tensor::<f64>::uniform([1, c, 2, 2], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let k = DynKernel { k: tape.constant(Tensor::from_f64([1, c], &[0.0, 1.0, 0.0]).unwrap()), stage: 3 };
        let p = predict(&tape, &s, &k, &tape.constant(d.clone())).unwrap();
        assert_eq!(p.logits.value().data(), &d.data()[4..8]);
    }

    #[test]
    fn assemble_matches_oracle() {
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Tensor::<f64>::uniform([1, c, 4, 4], -1.0, 1.0, &mut rng);
        let prev = Tensor::<f64>::uniform([1, 1, 2, 2], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let pred = StagePrediction { logits: tape.constant(prev.clone()), stage: 2 };
        let a = assemble(&tape.constant(d.clone()), &pred).unwrap().value();
        let want = oracle::assemble(&d.to_f64(), c, 4, 4, &prev.to_f64());
        for (g, w) in a.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_rejects_wrong_scale() {
        let tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let pred = StagePrediction { logits: tape.constant(Tensor::zeros([1, 1, 4, 4])), stage: 2 };
        assert!(assemble(&d, &pred).is_err());
    }
}
