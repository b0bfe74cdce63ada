//! Central finite-difference check of every differentiable op and of the
//! full model loss, in f64.
//!
//! Each case builds a graph from named tensors in a [`ParamStore`]. The
//! checked scalar is `Σ out ⊙ R` for a fixed random `R`, so every output
//! element contributes. Names starting with `const.` are inputs that are not
//! differentiated (targets).
//!
//! A central difference is meaningless when `±ε` moves some ReLU input across
//! zero, so probes that change the ReLU pattern are skipped and redrawn.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::scaled_dot_attention;
use crate::error::Result;
use crate::head::{self, DynKernel, StagePrediction};
use crate::loss::total_loss;
use crate::model::{ModelConfig, SegModel};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

pub const EPS: f64 = 1e-3;
pub const THRESHOLD: f64 = 1e-2;
/// Denominator floor of the relative error, so that two gradients that are
/// both ~0 do not count as a mismatch.
pub const REL_FLOOR: f64 = 1e-4;
/// Size of the end-to-end model input.
pub const MODEL_INPUT: usize = 32;

type Build = for<'t> fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>;

struct Case {
    name: &'static str,
    store: ParamStore<f64>,
    build: Build,
    /// Coordinates probed per tensor; `None` checks every element.
    probes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes dropped because `±ε` crossed a ReLU kink.
    pub skipped: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < THRESHOLD
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Weighted loss and the ReLU pattern it was computed under.
fn weighted_loss(case: &Case, store: &ParamStore<f64>, weights: &Tensor<f64>) -> Result<(f64, Vec<bool>)> {
    let tape = Tape::new();
    let out = (case.build)(&tape, store)?;
    let w = tape.constant(weights.clone());
    let loss = out.mul(&w)?.sum()?.value().data()[0];
    Ok((loss, tape.relu_pattern()))
}

fn check(case: Case, rng: &mut ChaCha8Rng) -> Result<OpResult> {
    let shape = {
        let tape = Tape::new();
        (case.build)(&tape, &case.store)?.shape()
    };
    let weights = Tensor::uniform(shape, -1.0, 1.0, rng);
    let grads = {
        let tape = Tape::new();
        let out = (case.build)(&tape, &case.store)?;
        let w = tape.constant(weights.clone());
        tape.backward(out.mul(&w)?.sum()?)?
    };
    let base_pattern = weighted_loss(&case, &case.store, &weights)?.1;
    let mut store = case.store.clone();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let names: Vec<String> = case.store.iter().map(|(n, _)| n.to_string()).filter(|n| !n.starts_with("const.")).collect();
    for name in names {
        let numel = store.get(&name)?.numel();
        let (wanted, candidates) = match case.probes {
            Some(k) if k < numel => (k, index::sample(rng, numel, (20 * k).min(numel)).into_vec()),
            _ => (numel, (0..numel).collect()),
        };
        let zero = Tensor::zeros(store.get(&name)?.shape().to_vec());
        let analytic = grads.get(&name).unwrap_or(&zero);
        let mut done = 0;
        for j in candidates {
            if done == wanted {
                break;
            }
            let orig = store.get(&name)?.data()[j];
            store.get_mut(&name)?.data_mut()[j] = orig + EPS;
            let (up, up_pattern) = weighted_loss(&case, &store, &weights)?;
            store.get_mut(&name)?.data_mut()[j] = orig - EPS;
            let (down, down_pattern) = weighted_loss(&case, &store, &weights)?;
            store.get_mut(&name)?.data_mut()[j] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            done += 1;
        }
        checked += done;
    }
    Ok(OpResult { name: case.name.to_string(), max_rel_err: worst, checked, skipped })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Random values kept at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand_t(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (gap + v.abs() * (1.0 - gap));
    }
    t
}

fn binary_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape.to_vec());
    for v in t.data_mut() {
        *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
    }
    t
}

fn store_of(items: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in items {
        s.insert(n, t);
    }
    s
}

fn x<'t>(tape: &'t Tape<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var<'t, f64>> {
    s.var(tape, name)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut add = |name, items: Vec<(&str, Tensor<f64>)>, build: Build| {
        cases.push(Case { name, store: store_of(items), build, probes: None });
    };
    add("add", vec![("a", rand_t(rng, &[2, 3])), ("b", rand_t(rng, &[2, 3]))], |t, s| x(t, s, "a")?.add(&x(t, s, "b")?));
    add("add_scalar", vec![("a", rand_t(rng, &[2, 3])), ("b", rand_t(rng, &[1]))], |t, s| {
        x(t, s, "a")?.add(&x(t, s, "b")?)
    });
    add("mul", vec![("a", rand_t(rng, &[2, 3])), ("b", rand_t(rng, &[2, 3]))], |t, s| x(t, s, "a")?.mul(&x(t, s, "b")?));
    add("mul_channel_broadcast", vec![("a", rand_t(rng, &[2, 3, 2, 2])), ("m", rand_t(rng, &[2, 1, 2, 2]))], |t, s| {
        x(t, s, "m")?.mul(&x(t, s, "a")?)
    });
    add("mul_scalar", vec![("a", rand_t(rng, &[4])), ("b", rand_t(rng, &[1]))], |t, s| x(t, s, "a")?.mul(&x(t, s, "b")?));
    add("affine", vec![("a", rand_t(rng, &[5]))], |t, s| x(t, s, "a")?.affine(2.0, -1.0));
    add("one_minus", vec![("a", rand_t(rng, &[5]))], |t, s| x(t, s, "a")?.one_minus());
    add("sigmoid", vec![("a", rand_t(rng, &[6]))], |t, s| x(t, s, "a")?.sigmoid());
    add("relu", vec![("a", away_from_zero(rng, &[8], 0.05))], |t, s| x(t, s, "a")?.relu());
    add(
        "conv2d_3x3_stride1",
        vec![("x", rand_t(rng, &[2, 2, 5, 5])), ("w", rand_t(rng, &[3, 2, 3, 3])), ("b", rand_t(rng, &[3]))],
        |t, s| x(t, s, "x")?.conv2d(&x(t, s, "w")?, Some(&x(t, s, "b")?), 1, 1),
    );
    add(
        "conv2d_3x3_stride2",
        vec![("x", rand_t(rng, &[1, 2, 6, 6])), ("w", rand_t(rng, &[2, 2, 3, 3])), ("b", rand_t(rng, &[2]))],
        |t, s| x(t, s, "x")?.conv2d(&x(t, s, "w")?, Some(&x(t, s, "b")?), 2, 1),
    );
    add("conv2d_1x1_nobias", vec![("x", rand_t(rng, &[2, 3, 3, 3])), ("w", rand_t(rng, &[2, 3, 1, 1]))], |t, s| {
        x(t, s, "x")?.conv2d(&x(t, s, "w")?, None, 1, 0)
    });
    add("global_avg_pool", vec![("a", rand_t(rng, &[2, 3, 2, 3]))], |t, s| x(t, s, "a")?.global_avg_pool());
    add("matmul", vec![("a", rand_t(rng, &[3, 4])), ("b", rand_t(rng, &[4, 2]))], |t, s| x(t, s, "a")?.matmul(&x(t, s, "b")?));
    add(
        "linear",
        vec![("x", rand_t(rng, &[3, 4])), ("w", rand_t(rng, &[4, 2])), ("b", rand_t(rng, &[2]))],
        |t, s| x(t, s, "x")?.linear(&x(t, s, "w")?, &x(t, s, "b")?),
    );
    add("softmax_rows", vec![("a", rand_t(rng, &[3, 4]))], |t, s| x(t, s, "a")?.softmax_rows());
    add("upsample_bilinear_x2", vec![("a", rand_t(rng, &[2, 2, 3, 3]))], |t, s| x(t, s, "a")?.upsample_bilinear(2));
    add("upsample_bilinear_x4", vec![("a", rand_t(rng, &[1, 1, 2, 3]))], |t, s| x(t, s, "a")?.upsample_bilinear(4));
    add("bmm", vec![("a", rand_t(rng, &[2, 3, 4])), ("b", rand_t(rng, &[2, 4, 2]))], |t, s| {
        x(t, s, "a")?.bmm(&x(t, s, "b")?, false)
    });
    add("bmm_transposed", vec![("a", rand_t(rng, &[2, 3, 4])), ("b", rand_t(rng, &[2, 5, 4]))], |t, s| {
        x(t, s, "a")?.bmm(&x(t, s, "b")?, true)
    });
    add("concat", vec![("a", rand_t(rng, &[2, 1, 3])), ("b", rand_t(rng, &[2, 2, 3]))], |t, s| {
        t.concat(&[x(t, s, "a")?, x(t, s, "b")?], 1)
    });
    add("slice", vec![("a", rand_t(rng, &[2, 6]))], |t, s| x(t, s, "a")?.slice(1, 2, 3));
    add("reshape", vec![("a", rand_t(rng, &[2, 6]))], |t, s| x(t, s, "a")?.reshape([3, 4]));
    add("mean_axis", vec![("a", rand_t(rng, &[2, 5, 3]))], |t, s| x(t, s, "a")?.mean_axis(1));
    add("channel_dot", vec![("d", rand_t(rng, &[2, 3, 2, 2])), ("k", rand_t(rng, &[2, 3]))], |t, s| {
        x(t, s, "d")?.channel_dot(&x(t, s, "k")?)
    });
    add("sum", vec![("a", rand_t(rng, &[3, 2]))], |t, s| x(t, s, "a")?.sum());
    add("mean", vec![("a", rand_t(rng, &[3, 2]))], |t, s| x(t, s, "a")?.mean());
    add("bce_with_logits", vec![("z", rand_t(rng, &[2, 1, 3, 3])), ("const.y", binary_t(rng, &[2, 1, 3, 3]))], |t, s| {
        x(t, s, "z")?.bce_with_logits(s.get("const.y")?)
    });
    add("dice_loss", vec![("z", rand_t(rng, &[2, 1, 3, 3])), ("const.y", binary_t(rng, &[2, 1, 3, 3]))], |t, s| {
        x(t, s, "z")?.dice_loss(s.get("const.y")?, 1.0)
    });
    add(
        "attention",
        vec![("q", rand_t(rng, &[2, 5, 4])), ("k", rand_t(rng, &[2, 5, 4])), ("v", rand_t(rng, &[2, 5, 3]))],
        |t, s| Ok(scaled_dot_attention(&x(t, s, "q")?, &x(t, s, "k")?, &x(t, s, "v")?)?.0),
    );
    add("assemble", vec![("d", rand_t(rng, &[2, 3, 4, 4])), ("p", rand_t(rng, &[2, 1, 2, 2]))], |t, s| {
        head::assemble(&x(t, s, "d")?, &StagePrediction { logits: x(t, s, "p")?, stage: 2 })
    });
    let c = 4;
    add(
        "update_kernel",
        vec![
            ("a", rand_t(rng, &[2, c])),
            ("k", rand_t(rng, &[2, c])),
            ("head.split.weight", rand_t(rng, &[c, 2 * c])),
            ("head.split.bias", rand_t(rng, &[2 * c])),
            ("head.gate.weight", rand_t(rng, &[c, c])),
            ("head.gate.bias", rand_t(rng, &[c])),
        ],
        |t, s| {
            let prev = DynKernel { k: x(t, s, "k")?, stage: 3 };
            Ok(head::update_kernel(t, s, &x(t, s, "a")?, &prev)?.0.k)
        },
    );
    add(
        "total_loss",
        vec![
            ("p2", rand_t(rng, &[1, 1, 2, 2])),
            ("p1", rand_t(rng, &[1, 1, 4, 4])),
            ("const.y", binary_t(rng, &[1, 1, 8, 8])),
        ],
        |t, s| {
            let preds = [
                StagePrediction { logits: x(t, s, "p2")?, stage: 2 },
                StagePrediction { logits: x(t, s, "p1")?, stage: 1 },
            ];
            total_loss(&preds, s.get("const.y")?)
        },
    );
    cases
}

fn model_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<Case> {
    let model = SegModel::<f64>::new(ModelConfig::default(), seed)?;
    let mut store = model.params.clone();
    let mut image = rand_t(rng, &[1, 3, MODEL_INPUT, MODEL_INPUT]);
    for v in image.data_mut() {
        *v = 0.5 * (*v + 1.0);
    }
    store.insert("input.image", image);
    store.insert("const.target", binary_t(rng, &[1, 1, MODEL_INPUT, MODEL_INPUT]));
    Ok(Case {
        name: "model_total_loss",
        store,
        build: |t, s| {
            let model = SegModel::from_params(s.clone())?;
            let out = model.forward(t, &s.var(t, "input.image")?)?;
            total_loss(&out.head.predictions, s.get("const.target")?)
        },
        probes: Some(3),
    })
}

/// Runs every case; results are in a fixed order.
pub fn run(seed: u64) -> Result<Vec<OpResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases(&mut rng) {
        out.push(check(case, &mut rng)?);
    }
    let case = model_case(&mut rng, seed)?;
    out.push(check(case, &mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, -1e-9) < 1e-4);
    }

    #[test]
    fn op_suite_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in op_cases(&mut rng) {
            let r = check(case, &mut rng).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn probes_across_a_kink_are_not_counted() {
        // ±ε straddles the relu corner, so nothing can be checked
        let case = Case {
            name: "kink",
            store: store_of(vec![("a", Tensor::from_f64([1], &[1e-4]).unwrap())]),
            build: |t, s| s.var(t, "a")?.relu(),
            probes: None,
        };
        let r = check(case, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!r.passed());
        assert_eq!((r.checked, r.skipped), (0, 1));
    }
}
