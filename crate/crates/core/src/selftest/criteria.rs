//! Oracle agreement, structural invariants and the metric suite.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_diff, rand_bits, rand_t, Check, Suite};
use crate::attention::{scaled_dot_attention, GlobalContext};
use crate::data::synth::{synth_dataset, SyntheticSpec};
use crate::error::Result;
use crate::head::{self, DynKernel, StagePrediction};
use crate::metrics::{confusion, report, report_as, ConfusionCounts, MetricReport, REPORT_COLUMNS};
use crate::model::{ModelConfig, SegModel};
use crate::oracle;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Largest absolute difference allowed between an f32 module and its f64
/// oracle.
pub const ORACLE_TOL: f64 = 1e-5;

/// Published scores (percent, report column order) of the method on
/// Kvasir-SEG and CVC-ClinicDB.
pub const PUBLISHED_KVASIR: [f64; 8] = [94.11, 98.68, 93.24, 93.74, 88.16, 97.71, 92.93, 98.31];
pub const PUBLISHED_CVC: [f64; 8] = [95.16, 99.14, 94.50, 94.89, 90.29, 98.50, 94.40, 98.88];

fn oracle_check(
    suite: &mut Suite,
    name: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) {
    suite.check(name, || {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(rng)?);
        }
        Ok((worst < ORACLE_TOL, format!("max |module − oracle| = {worst:.2e} over {instances} instances")))
    });
}

fn linear_params(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) {
    store.insert(format!("{prefix}.weight"), rand_t(rng, &[d_in, d_out]));
    store.insert(format!("{prefix}.bias"), rand_t(rng, &[d_out]));
}

fn f64s(store: &ParamStore<f32>, name: &str) -> Vec<f64> {
    store.get(name).map(|t| t.to_f64()).unwrap_or_default()
}

/// Module implementations against brute-force oracles on random small
/// instances.
pub fn equation_oracles(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e0e);
    let mut suite = Suite::default();

    oracle_check(&mut suite, "oracle_kernel_mlp", instances, &mut rng, |rng| {
        let (n, d, c) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let mut store = ParamStore::new();
        linear_params(&mut store, rng, "head.phi1", d, d);
        linear_params(&mut store, rng, "head.phi2", d, c);
        let g = rand_t(rng, &[n, d]);
        let tape = Tape::new();
        let ctx = GlobalContext { g: tape.constant(g.clone()), attention: None };
        let k = head::init_kernel(&tape, &store, &ctx)?.k.value().to_f64();
        let g = g.to_f64();
        let (w1, b1) = (f64s(&store, "head.phi1.weight"), f64s(&store, "head.phi1.bias"));
        let (w2, b2) = (f64s(&store, "head.phi2.weight"), f64s(&store, "head.phi2.bias"));
        let mut worst = 0.0f64;
        for b in 0..n {
            let want = oracle::mlp(&g[b * d..(b + 1) * d], &w1, &b1, &w2, &b2, d, c);
            worst = worst.max(max_diff(&k[b * c..(b + 1) * c], &want));
        }
        Ok(worst)
    });

    oracle_check(&mut suite, "oracle_lesion_assembly", instances, &mut rng, |rng| {
        let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..5));
        let (h, w) = (2 * rng.gen_range(1..5), 2 * rng.gen_range(1..5));
        let d = rand_t(rng, &[n, c, h, w]);
        let prev = Tensor::<f32>::uniform([n, 1, h / 2, w / 2], -3.0, 3.0, rng);
        let tape = Tape::new();
        let p = StagePrediction { logits: tape.constant(prev.clone()), stage: 2 };
        let a = head::assemble(&tape.constant(d.clone()), &p)?.value().to_f64();
        let (d, prev) = (d.to_f64(), prev.to_f64());
        let (plane, pplane) = (c * h * w, h * w / 4);
        let mut worst = 0.0f64;
        for b in 0..n {
            let want = oracle::assemble(&d[b * plane..(b + 1) * plane], c, h, w, &prev[b * pplane..(b + 1) * pplane]);
            worst = worst.max(max_diff(&a[b * c..(b + 1) * c], &want));
        }
        Ok(worst)
    });

    oracle_check(&mut suite, "oracle_gated_kernel_update", instances, &mut rng, |rng| {
        let (n, c) = (rng.gen_range(1..4), rng.gen_range(1..7));
        let mut store = ParamStore::new();
        linear_params(&mut store, rng, "head.split", c, 2 * c);
        linear_params(&mut store, rng, "head.gate", c, c);
        let (a, kp) = (rand_t(rng, &[n, c]), rand_t(rng, &[n, c]));
        let tape = Tape::new();
        let prev = DynKernel { k: tape.constant(kp.clone()), stage: 3 };
        let (k, gate) = head::update_kernel(&tape, &store, &tape.constant(a.clone()), &prev)?;
        let (k, gate, a, kp) = (k.k.value().to_f64(), gate.value().to_f64(), a.to_f64(), kp.to_f64());
        let mut worst = 0.0f64;
        for b in 0..n {
            let r = b * c..(b + 1) * c;
            let (wk, wg) = oracle::kernel_update(
                &a[r.clone()],
                &kp[r.clone()],
                &f64s(&store, "head.split.weight"),
                &f64s(&store, "head.split.bias"),
                &f64s(&store, "head.gate.weight"),
                &f64s(&store, "head.gate.bias"),
            );
            worst = worst.max(max_diff(&k[r.clone()], &wk)).max(max_diff(&gate[r], &wg));
        }
        Ok(worst)
    });

    oracle_check(&mut suite, "oracle_attention", instances, &mut rng, |rng| {
        let (n, len) = (rng.gen_range(1..3), rng.gen_range(1..7));
        let (dk, dv) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let (q, k, v) = (rand_t(rng, &[n, len, dk]), rand_t(rng, &[n, len, dk]), rand_t(rng, &[n, len, dv]));
        let tape = Tape::new();
        let (out, weights) =
            scaled_dot_attention(&tape.constant(q.clone()), &tape.constant(k.clone()), &tape.constant(v.clone()))?;
        let (out, weights) = (out.value().to_f64(), weights.value().to_f64());
        let (q, k, v) = (q.to_f64(), k.to_f64(), v.to_f64());
        let mut worst = 0.0f64;
        for b in 0..n {
            let (qs, vs) = (len * dk, len * dv);
            let (wo, ww) = oracle::attention(
                &q[b * qs..(b + 1) * qs],
                &k[b * qs..(b + 1) * qs],
                &v[b * vs..(b + 1) * vs],
                len,
                dk,
                dv,
            );
            worst = worst
                .max(max_diff(&out[b * vs..(b + 1) * vs], &wo))
                .max(max_diff(&weights[b * len * len..(b + 1) * len * len], &ww));
        }
        Ok(worst)
    });

    oracle_check(&mut suite, "oracle_bilinear_upsample", instances, &mut rng, |rng| {
        let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let f = [1, 2, 4][rng.gen_range(0..3)];
        let x = rand_t(rng, &[n, c, h, w]);
        let tape = Tape::new();
        let got = tape.constant(x.clone()).upsample_bilinear(f)?.value().to_f64();
        Ok(max_diff(&got, &oracle::resize_bilinear(&x.to_f64(), n * c, h, w, f * h, f * w)))
    });

    oracle_check(&mut suite, "oracle_conv2d", instances, &mut rng, |rng| {
        let (n, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..3);
        let pad = (k - 1) / 2;
        let x = rand_t(rng, &[n, ci, h, w]);
        let wt = rand_t(rng, &[co, ci, k, k]);
        let bias = rng.gen_bool(0.5).then(|| rand_t(rng, &[co]));
        let tape = Tape::new();
        let bv = bias.clone().map(|b| tape.constant(b));
        let got = tape.constant(x.clone()).conv2d(&tape.constant(wt.clone()), bv.as_ref(), stride, pad)?.value().to_f64();
        let b64 = bias.map(|b| b.to_f64());
        let want = oracle::conv2d(&x.to_f64(), (n, ci, h, w), &wt.to_f64(), (co, k, k), b64.as_deref(), stride, pad);
        Ok(max_diff(&got, &want))
    });

    suite.checks
}

fn probe_batch(seed: u64) -> Result<Tensor<f32>> {
    let samples = synth_dataset(&SyntheticSpec { count: 2, image_size: 64, seed, ..SyntheticSpec::default() });
    Tensor::stack(&samples.into_iter().map(|s| s.image).collect::<Vec<_>>())
}

/// Gate range, convexity of the kernel update, attention normalisation,
/// decoder width and the closed-gate limit, on a default model.
pub fn structural_invariants(seed: u64) -> Vec<Check> {
    let mut suite = Suite::default();
    let model = match SegModel::<f32>::new(ModelConfig::default(), seed) {
        Ok(m) => m,
        Err(e) => {
            suite.check("structural_model_init", || Err(e));
            return suite.checks;
        }
    };
    let images = match probe_batch(seed) {
        Ok(t) => t,
        Err(e) => {
            suite.check("structural_probe_batch", || Err(e));
            return suite.checks;
        }
    };

    suite.check("gates_strictly_between_0_and_1", || {
        let tape = Tape::new();
        let out = model.forward(&tape, &tape.constant(images.clone()))?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in &out.head.gates {
            for v in g.value().to_f64() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Ok((lo > 0.0 && hi < 1.0, format!("gate range [{lo:.4}, {hi:.4}]")))
    });

    suite.check("kernel_update_is_convex", || {
        let m = model.cast::<f64>();
        let tape = Tape::new();
        let out = m.forward(&tape, &tape.constant(images.clone().cast()))?;
        let c_d = m.config.c_d;
        let mut kernel = out.head.kernels[0];
        let mut pred = out.head.predictions[0];
        let mut worst = f64::NEG_INFINITY;
        for i in (1..=4).rev() {
            let d = out.decoder.stage(i);
            let a = head::assemble(d, &pred)?;
            let feat = m.params.linear(&tape, "head.split", &a)?.slice(1, 0, c_d)?.value().to_f64();
            let (next, _) = head::update_kernel(&tape, &m.params, &a, &kernel)?;
            let (k_prev, k_new) = (kernel.k.value().to_f64(), next.k.value().to_f64());
            for j in 0..k_new.len() {
                let (lo, hi) = (feat[j].min(k_prev[j]), feat[j].max(k_prev[j]));
                let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                worst = worst.max((lo - k_new[j]).max(k_new[j] - hi) / slack);
            }
            kernel = next;
            pred = head::predict(&tape, &m.params, &kernel, d)?;
        }
        Ok((worst <= 1.0, "min(A_feat, K_prev) ≤ K ≤ max(A_feat, K_prev) up to 1e-12 relative".into()))
    });

    suite.check("attention_rows_sum_to_one", || {
        let tape = Tape::new();
        let out = model.forward(&tape, &tape.constant(images.clone()))?;
        let w = out.context.attention.expect("default model uses encoder attention").value().to_f64();
        let worst = w.chunks(5).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max |row sum − 1| = {worst:.2e}")))
    });

    suite.check("decoder_stages_have_cd_channels", || {
        let tape = Tape::new();
        let out = model.forward(&tape, &tape.constant(images.clone()))?;
        let shapes: Vec<Vec<usize>> = (1..=5).map(|i| out.decoder.stage(i).shape()).collect();
        let ok = shapes.iter().enumerate().all(|(i, s)| s[1] == 32 && s[2] == 64 >> (i + 1));
        Ok((ok, format!("{shapes:?}")))
    });

    suite.check("closed_gate_freezes_kernel", || {
        let mut m = model.clone();
        let c_d = m.config.c_d;
        m.params.insert("head.gate.bias", Tensor::full([c_d], -30.0));
        let tape = Tape::new();
        let out = m.forward(&tape, &tape.constant(images.clone()))?;
        let (k5, k1) = (out.head.kernels[0].k.value().to_f64(), out.head.kernels[4].k.value().to_f64());
        let d = max_diff(&k5, &k1);
        Ok((d < 1e-4, format!("‖K₁ − K₅‖∞ = {d:.2e}")))
    });

    suite.checks
}

/// Pooled counts over `total` pixels that reproduce a published row's
/// recall, specificity and precision. These three fix the count ratios.
pub fn counts_from_row(row: &[f64; 8], total: u64) -> ConfusionCounts {
    let (r, s, p) = (row[0] / 100.0, row[1] / 100.0, row[2] / 100.0);
    let prevalence = (1.0 - s) * p / (r * (1.0 - p) + (1.0 - s) * p);
    let pos = (prevalence * total as f64).round() as u64;
    let tp = (r * pos as f64).round() as u64;
    let neg = total - pos;
    let tn = (s * neg as f64).round() as u64;
    ConfusionCounts { tp, fp: neg - tn, tn, fn_: pos - tp }
}

/// Whether a mean Dice and mean IoU_p (percent, rounded to two decimals)
/// can come from any set of images. Each image has
/// `dice = 2·iou/(1+iou)`, a concave map with `dice ≥ iou`, so the means
/// satisfy `iou ≤ dice ≤ 2·iou/(1+iou)`.
pub fn dice_iou_feasible(dice_pct: f64, iou_pct: f64) -> bool {
    let half_ulp = 0.005;
    let (dice_lo, dice_hi) = ((dice_pct - half_ulp) / 100.0, (dice_pct + half_ulp) / 100.0);
    let (iou_lo, iou_hi) = ((iou_pct - half_ulp) / 100.0, (iou_pct + half_ulp) / 100.0);
    dice_hi >= iou_lo && dice_lo <= 2.0 * iou_hi / (1.0 + iou_hi)
}

fn percent_row(r: &MetricReport) -> [f64; 8] {
    r.values().map(|v| (v * 10_000.0).round() / 100.0)
}

/// Counting oracle, exact identities and the published-row round trip.
pub fn metric_oracle(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7);
    let mut suite = Suite::default();
    let pairs: Vec<(Vec<bool>, Vec<bool>)> = (0..1000)
        .map(|i| {
            // include all-empty and all-full masks among the random ones
            let (pp, pt) = match i {
                0 => (0.0, 0.0),
                1 => (1.0, 1.0),
                2 => (0.0, 1.0),
                _ => (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
            };
            (rand_bits(&mut rng, 64, pp), rand_bits(&mut rng, 64, pt))
        })
        .collect();

    suite.check("report_matches_pixel_count", || {
        let mut bad = 0;
        for (p, t) in &pairs {
            let c = confusion(p, t)?;
            let (tp, fp, tn, fn_) = oracle::confusion(p, t);
            let same_counts = c == ConfusionCounts { tp, fp, tn, fn_ };
            if !same_counts || report(&c).values() != oracle::metrics(tp, fp, tn, fn_) {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of {} random 8×8 pairs differ", pairs.len())))
    });

    suite.check("dice_iou_and_miou_identities_exact", || {
        let one = Ratio::from_integer(1u128);
        let two = Ratio::from_integer(2u128);
        let mut bad = 0;
        for (p, t) in &pairs {
            let c = confusion(p, t)?;
            let q: MetricReport<Ratio<u128>> = report_as(&c);
            let f = report(&c);
            let exact = q.dice == two * q.iou_p / (one + q.iou_p) && q.miou == (q.iou_p + q.iou_b) / two;
            if !exact || f.miou != (f.iou_p + f.iou_b) / 2.0 {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of {} pairs violate an identity", pairs.len())))
    });

    for (name, row) in [("published_row_kvasir", PUBLISHED_KVASIR), ("published_row_cvc", PUBLISHED_CVC)] {
        suite.check(name, || {
            let counts = counts_from_row(&row, 100_000_000);
            let back = percent_row(&report(&counts));
            let mismatched: Vec<String> = REPORT_COLUMNS
                .iter()
                .zip(row.iter().zip(back))
                .filter(|(_, (want, got))| (*want - got).abs() > 1e-9)
                .map(|(col, (want, got))| format!("{col} {want:.2}→{got:.2}"))
                .collect();
            let feasible = dice_iou_feasible(row[3], row[4]);
            let iou_hi = (row[4] + 0.005) / 100.0;
            let mut detail = format!(
                "pooled counts tp={} fp={} tn={} fn={}; any per-image counts need mean dice ≤ 2m/(1+m) = {:.3} \
                 for mean iou_p m ≤ {:.3}, row has dice ≥ {:.3}: realisable {feasible}",
                counts.tp,
                counts.fp,
                counts.tn,
                counts.fn_,
                200.0 * iou_hi / (1.0 + iou_hi),
                100.0 * iou_hi,
                row[3] - 0.005
            );
            if !mismatched.is_empty() {
                detail.push_str(&format!("; not reproduced: {}", mismatched.join(", ")));
            }
            Ok((mismatched.is_empty(), detail))
        });
    }

    suite.checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_reproduce_defining_ratios() {
        let c = counts_from_row(&PUBLISHED_KVASIR, 100_000_000);
        let back = percent_row(&report(&c));
        assert_eq!(&back[..3], &PUBLISHED_KVASIR[..3]);
        assert_eq!(c.total(), 100_000_000);
    }

    #[test]
    fn feasibility_bounds() {
        assert!(dice_iou_feasible(94.89, 90.29));
        assert!(!dice_iou_feasible(93.74, 88.16));
        // a pooled report always satisfies the bound
        let r = report(&ConfusionCounts { tp: 70, fp: 9, tn: 900, fn_: 21 });
        assert!(dice_iou_feasible((r.dice * 1e4).round() / 100.0, (r.iou_p * 1e4).round() / 100.0));
    }
}
