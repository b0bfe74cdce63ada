//! Worked examples for every module, each a closed form or an oracle
//! comparison on a tiny input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{max_diff, rand_bits, rand_t, Check, Suite};
use crate::attention::{encoder_attention, scaled_dot_attention, GlobalContext};
use crate::backbone::{self, BackboneConfig};
use crate::data::augment::{augment, hflip, AugmentConfig};
use crate::data::synth::{foreground_fraction, generate_synthetic, synth_dataset, SyntheticSpec};
use crate::data::{pnm, resize_image, resize_nearest, split_indices, Sample};
use crate::decoder;
use crate::error::{Error, Result};
use crate::head::{self, DynKernel, StagePrediction};
use crate::loss;
use crate::metrics::{binarize, confusion, report, ConfusionCounts};
use crate::model::{ModelConfig, SegModel};
use crate::optim::{OptimState, PolySchedule, SgdConfig};
use crate::oracle;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

fn t64(shape: &[usize], data: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_f64(shape.to_vec(), data)
}

fn all_close(t: &Tensor<f64>, want: &[f64], tol: f64) -> bool {
    max_diff(&t.to_f64(), want) <= tol
}

fn tensor_examples(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    suite.expect("conv2d_identity_kernel", || {
        let tape = Tape::new();
        let y = tape.constant(Tensor::<f64>::ones([1, 1, 2, 2])).conv2d(&tape.constant(Tensor::ones([1, 1, 1, 1])), None, 1, 0)?;
        Ok(all_close(&y.value(), &[1.0; 4], 0.0))
    });
    suite.expect("conv2d_zero_weight_gives_bias", || {
        let tape = Tape::new();
        let x = tape.constant(rand_t(rng, &[1, 2, 3, 3]).cast::<f64>());
        let b = tape.constant(Tensor::full([1], 0.7));
        let y = x.conv2d(&tape.constant(Tensor::zeros([1, 2, 3, 3])), Some(&b), 1, 1)?;
        Ok(all_close(&y.value(), &[0.7; 9], 0.0))
    });
    suite.expect("conv2d_3x3_pad1_vs_direct_sum", || {
        let x = [1.0, 2.0, 3.0, 4.0];
        let tape = Tape::new();
        let y = tape.constant(t64(&[1, 1, 2, 2], &x)?).conv2d(&tape.constant(Tensor::ones([1, 1, 3, 3])), None, 1, 1)?;
        let want = oracle::conv2d(&x, (1, 1, 2, 2), &[1.0; 9], (1, 3, 3), None, 1, 1);
        Ok(all_close(&y.value(), &want, 1e-12) && all_close(&y.value(), &[10.0; 4], 1e-12))
    });
    suite.expect("global_avg_pool_examples", || {
        let tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::full([1, 2, 3, 3], 3.0)).global_avg_pool()?;
        let m = tape.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])?).global_avg_pool()?;
        let z = tape.constant(Tensor::<f64>::zeros([1, 3, 2, 2])).global_avg_pool()?;
        Ok(all_close(&c.value(), &[3.0, 3.0], 0.0) && all_close(&m.value(), &[2.5], 0.0) && all_close(&z.value(), &[0.0; 3], 0.0))
    });
    suite.expect("matmul_examples", || {
        let a = rand_t(rng, &[2, 2]).cast::<f64>();
        let b = rand_t(rng, &[2, 2]).cast::<f64>();
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])?);
        let id = eye.matmul(&va)?.value();
        let zero = va.matmul(&tape.constant(Tensor::zeros([2, 2])))?.value();
        let ab = va.matmul(&vb)?.value();
        Ok(id == a && all_close(&zero, &[0.0; 4], 0.0) && all_close(&ab, &oracle::matmul(&a.to_f64(), &b.to_f64(), 2, 2, 2), 1e-12))
    });
    suite.expect("softmax_examples", || {
        let tape = Tape::new();
        let eq = tape.constant(Tensor::<f64>::full([1, 4], 1.3)).softmax_rows()?;
        let one = tape.constant(Tensor::<f64>::full([1, 1], -2.0)).softmax_rows()?;
        let ln3 = tape.constant(t64(&[1, 2], &[0.0, 3f64.ln()])?).softmax_rows()?;
        Ok(all_close(&eq.value(), &[0.25; 4], 1e-15) && all_close(&one.value(), &[1.0], 0.0) && all_close(&ln3.value(), &[0.25, 0.75], 1e-15))
    });
    suite.expect("activation_examples", || {
        let tape = Tape::new();
        let s = tape.constant(Tensor::<f64>::zeros([1])).sigmoid()?;
        let r = tape.constant(t64(&[2], &[-1.0, 2.0])?).relu()?;
        let x = rand_t(rng, &[3, 2]).cast::<f64>();
        let lin = tape.constant(x.clone()).linear(&tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])?), &tape.constant(Tensor::zeros([2])))?;
        Ok(all_close(&s.value(), &[0.5], 0.0) && all_close(&r.value(), &[0.0, 2.0], 0.0) && lin.value() == x)
    });
    suite.expect("bilinear_upsample_examples", || {
        let tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::full([1, 1, 3, 2], 5.0)).upsample_bilinear(2)?;
        let x = rand_t(rng, &[1, 2, 2, 3]).cast::<f64>();
        let same = tape.constant(x.clone()).upsample_bilinear(1)?;
        let toy = [0.0, 1.0, 1.0, 2.0];
        let up = tape.constant(t64(&[1, 1, 2, 2], &toy)?).upsample_bilinear(2)?;
        Ok(all_close(&c.value(), &[5.0; 24], 1e-15)
            && same.value() == x
            && all_close(&up.value(), &oracle::resize_bilinear(&toy, 1, 2, 2, 4, 4), 1e-15))
    });
    suite.expect("autodiff_closed_forms", || {
        let tape = Tape::new();
        let x = rand_t(rng, &[5]).cast::<f64>();
        let w = tape.param("w", &Tensor::zeros([5]));
        let loss = w.mul(&tape.constant(x.clone()))?.sum()?;
        let gw = tape.backward(loss)?.get("w").cloned();
        let tape = Tape::new();
        let z = tape.param("z", &Tensor::zeros([1]));
        let loss = z.sigmoid()?.scale(3.0)?.sum()?;
        let gz = tape.backward(loss)?.get("z").cloned();
        Ok(gw.is_some_and(|g| g == x) && gz.is_some_and(|g| all_close(&g, &[0.75], 1e-15)))
    });
}

fn model_examples(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    suite.expect("encoder_stage_shapes_and_zero_input", || {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f32>::new();
        backbone::init(&cfg, &mut store, rng);
        for (name, t) in store.entries().to_vec() {
            if name.ends_with(".bias") {
                store.insert(name, Tensor::zeros(t.shape().to_vec()));
            }
        }
        let tape = Tape::new();
        let pyr = backbone::encode(&tape, &store, &cfg, &tape.constant(Tensor::zeros([1, 3, 64, 64])))?;
        let shapes_ok = pyr.stages.iter().enumerate().all(|(i, s)| s.shape() == [1, cfg.channels[i], 32 >> i, 32 >> i]);
        Ok(shapes_ok && pyr.stages[4].shape() == [1, 64, 2, 2] && pyr.stages.iter().all(|s| s.value().is_finite()))
    });
    suite.expect("attention_symmetric_tokens_are_uniform", || {
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        crate::attention::init(&[3; 5], d, &mut store, rng);
        let proj_w = store.get("ea.proj1.weight")?.clone();
        let proj_b = store.get("ea.proj1.bias")?.clone();
        for i in 2..=5 {
            store.insert(format!("ea.proj{i}.weight"), proj_w.clone());
            store.insert(format!("ea.proj{i}.bias"), proj_b.clone());
        }
        let tape = Tape::new();
        let v = rand_t(rng, &[1, 3]).cast::<f64>();
        let pooled: Vec<_> = (0..5).map(|_| tape.constant(v.clone())).collect();
        let ctx = encoder_attention(&tape, &store, d, &pooled)?;
        Ok(ctx.attention.is_some_and(|w| all_close(&w.value(), &[0.2; 25], 1e-12)))
    });
    suite.expect("attention_two_token_vs_oracle", || {
        let (q, k, v) = ([1.0, 0.0, 0.5, -1.0], [0.0, 2.0, 1.0, 1.0], [1.0, 2.0, 3.0, 4.0]);
        let tape = Tape::new();
        let (out, w) = scaled_dot_attention(
            &tape.constant(t64(&[1, 2, 2], &q)?),
            &tape.constant(t64(&[1, 2, 2], &k)?),
            &tape.constant(t64(&[1, 2, 2], &v)?),
        )?;
        let (wo, ww) = oracle::attention(&q, &k, &v, 2, 2, 2);
        Ok(all_close(&out.value(), &wo, 1e-14) && all_close(&w.value(), &ww, 1e-14))
    });
    suite.expect("uca_identity_weights_give_relu", || {
        let c = 3;
        let mut store = ParamStore::<f64>::new();
        let mut eye = Tensor::zeros([c, c, 1, 1]);
        for i in 0..c {
            eye.set(&[i, i, 0, 0], 1.0);
        }
        let tape = Tape::new();
        let x = rand_t(rng, &[1, c, 2, 2]).cast::<f64>();
        let mut stages = Vec::new();
        for s in 1..=5 {
            store.insert(format!("uca.stage{s}.weight"), eye.clone());
            store.insert(format!("uca.stage{s}.bias"), Tensor::zeros([c]));
            stages.push(tape.constant(x.clone()));
        }
        let pyr = backbone::FeaturePyramid { stages, channels: [c; 5], strides: backbone::STRIDES };
        let out = decoder::unify_channels(&tape, &store, &pyr)?;
        let want: Vec<f64> = x.to_f64().into_iter().map(oracle::relu).collect();
        Ok(out.iter().all(|u| all_close(&u.value(), &want, 0.0)))
    });
    suite.expect("decoder_stage_shapes", || {
        let model = SegModel::<f32>::new(ModelConfig::default(), 3)?;
        let tape = Tape::new();
        let out = model.forward(&tape, &tape.constant(Tensor::zeros([1, 3, 64, 64])))?;
        Ok(out.decoder.stage(1).shape() == [1, 32, 32, 32]
            && out.decoder.stage(5).shape() == [1, 32, 2, 2]
            && out.head.predictions[4].logits.shape() == [1, 1, 32, 32]
            && out.head.predictions[0].logits.shape() == [1, 1, 2, 2])
    });
    suite.expect("kernel_from_zero_context_is_zero", || {
        let mut store = ParamStore::<f64>::new();
        head::init(4, 3, &mut store, rng);
        for n in ["head.phi1.bias", "head.phi2.bias"] {
            let shape = store.get(n)?.shape().to_vec();
            store.insert(n, Tensor::zeros(shape));
        }
        let tape = Tape::new();
        let g = tape.constant(Tensor::zeros([2, 4]));
        let k = head::init_kernel(&tape, &store, &GlobalContext { g, attention: None })?;
        Ok(all_close(&k.k.value(), &[0.0; 6], 0.0))
    });
    suite.expect("identical_contexts_give_identical_kernels", || {
        let mut store = ParamStore::<f32>::new();
        head::init(4, 3, &mut store, rng);
        let row = rand_t(rng, &[1, 4]);
        let tape = Tape::new();
        let g = tape.constant(Tensor::stack(&[row.clone(), row])?.reshape([2, 4])?);
        let k = head::init_kernel(&tape, &store, &GlobalContext { g, attention: None })?.k.value();
        Ok(k.data()[..3] == k.data()[3..])
    });
    suite.expect("one_hot_kernel_selects_channel", || {
        let mut store = ParamStore::<f64>::new();
        store.insert("head.pred_bias", Tensor::zeros([1]));
        let d = rand_t(rng, &[1, 3, 2, 2]).cast::<f64>();
        let tape = Tape::new();
        let k = DynKernel { k: tape.constant(t64(&[1, 3], &[0.0, 1.0, 0.0])?), stage: 1 };
        let p = head::predict(&tape, &store, &k, &tape.constant(d.clone()))?;
        let zero = DynKernel { k: tape.constant(Tensor::zeros([1, 3])), stage: 1 };
        let z = head::predict(&tape, &store, &zero, &tape.constant(d.clone()))?;
        Ok(all_close(&p.logits.value(), &d.to_f64()[4..8], 0.0) && all_close(&z.logits.value(), &[0.0; 4], 0.0))
    });
    suite.expect("assembly_saturation_limits", || {
        let d = rand_t(rng, &[1, 2, 2, 2]).cast::<f64>();
        let tape = Tape::new();
        let vd = tape.constant(d.clone());
        let hi = head::assemble(&vd, &StagePrediction { logits: tape.constant(Tensor::full([1, 1, 1, 1], 40.0)), stage: 2 })?;
        let lo = head::assemble(&vd, &StagePrediction { logits: tape.constant(Tensor::full([1, 1, 1, 1], -40.0)), stage: 2 })?;
        let mean: Vec<f64> = d.to_f64().chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
        Ok(all_close(&hi.value(), &mean, 1e-12) && lo.value().max_abs() < 1e-12)
    });
    suite.expect("zero_gate_weights_average_kernels", || {
        let c = 3;
        let mut store = ParamStore::<f64>::new();
        head::init(4, c, &mut store, rng);
        store.insert("head.gate.weight", Tensor::zeros([c, c]));
        store.insert("head.gate.bias", Tensor::zeros([c]));
        let (a, kp) = (rand_t(rng, &[1, c]).cast::<f64>(), rand_t(rng, &[1, c]).cast::<f64>());
        let tape = Tape::new();
        let va = tape.constant(a);
        let prev = DynKernel { k: tape.constant(kp.clone()), stage: 5 };
        let (k, gate) = head::update_kernel(&tape, &store, &va, &prev)?;
        let feat = store.linear(&tape, "head.split", &va)?.slice(1, 0, c)?.value().to_f64();
        let want: Vec<f64> = feat.iter().zip(kp.to_f64()).map(|(f, k)| 0.5 * f + 0.5 * k).collect();
        Ok(all_close(&gate.value(), &[0.5; 3], 0.0) && all_close(&k.k.value(), &want, 1e-15))
    });
}

fn loss_examples(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    suite.expect("bce_closed_forms", || {
        let tape = Tape::new();
        let t = Tensor::from_f64([1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0])?;
        let zero = loss::bce_loss(&tape.constant(Tensor::<f64>::zeros([1, 1, 2, 2])), &t)?;
        let sat = loss::bce_loss(&tape.constant(Tensor::full([1, 1, 2, 2], 30.0)), &Tensor::ones([1, 1, 2, 2]))?;
        let z = [-1.0, 0.5, 2.0, -0.3];
        let mixed = loss::bce_loss(&tape.constant(t64(&[1, 1, 2, 2], &z)?), &t)?;
        Ok(all_close(&zero.value(), &[2f64.ln()], 1e-15)
            && sat.value().max_abs() < 1e-12
            && all_close(&mixed.value(), &[oracle::bce(&z, &t.to_f64())], 1e-14))
    });
    suite.expect("dice_loss_closed_forms", || {
        let tape = Tape::new();
        let ones = Tensor::<f64>::ones([1, 1, 2, 2]);
        let perfect = loss::dice_loss(&tape.constant(Tensor::full([1, 1, 2, 2], 30.0)), &ones)?;
        let empty = loss::dice_loss(&tape.constant(Tensor::full([1, 1, 2, 2], -800.0)), &Tensor::zeros([1, 1, 2, 2]))?;
        let z = [20.0, 20.0, -20.0, -20.0];
        let t = [1.0, 0.0, 1.0, 0.0];
        let half = loss::dice_loss(&tape.constant(t64(&[1, 1, 2, 2], &z)?), &Tensor::from_f64([1, 1, 2, 2], &t)?)?;
        Ok(perfect.value().data()[0] < 0.01
            && empty.value().data()[0] == 0.0
            && all_close(&half.value(), &[oracle::dice(&z, &t, 1, loss::DICE_EPS)], 1e-14))
    });
    suite.expect("deep_supervision_means_stage_losses", || {
        let tape = Tape::new();
        let target = Tensor::from_f64([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])?;
        let (a, b) = (rand_t(rng, &[1, 1, 2, 2]).cast::<f64>(), rand_t(rng, &[1, 1, 2, 2]).cast::<f64>());
        let pa = StagePrediction { logits: tape.constant(a), stage: 1 };
        let pb = StagePrediction { logits: tape.constant(b), stage: 2 };
        let single = loss::total_loss(&[pa], &target)?.value().data()[0];
        let la = loss::stage_loss(&pa.logits, &target)?.value().data()[0];
        let lb = loss::stage_loss(&pb.logits, &target)?.value().data()[0];
        let same = loss::total_loss(&[pa, pa, pa], &target)?.value().data()[0];
        let two = loss::total_loss(&[pa, pb], &target)?.value().data()[0];
        Ok(single == la && (same - la).abs() < 1e-15 && (two - (la + lb) / 2.0).abs() < 1e-15)
    });
    suite.expect("poly_schedule_and_plain_sgd_step", || {
        let s = PolySchedule { lr0: 4e-4, power: 0.9, total_steps: 50 };
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0, ..SgdConfig::default() };
        let mut params = ParamStore::<f64>::new();
        let w = rand_t(rng, &[4]).cast::<f64>();
        params.insert("w.weight", w.clone());
        let g = rand_t(rng, &[4]).cast::<f64>();
        let tape = Tape::new();
        let loss = tape.param("w.weight", &w).mul(&tape.constant(g.clone()))?.sum()?;
        let grads = tape.backward(loss)?;
        let mut opt = OptimState::new(cfg.clone(), &params, 50);
        let lr = opt.step(&mut params, &grads, 0)?;
        let want: Vec<f64> = w.to_f64().iter().zip(g.to_f64()).map(|(w, g)| w - lr * g).collect();
        Ok(s.lr(50) == 0.0 && lr == cfg.lr0 && all_close(params.get("w.weight")?, &want, 1e-18))
    });
}

fn data_examples(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let s = Sample::<f32> { id: "x".into(), image: rand_t(rng, &[3, 6, 5]), mask: rand_t(rng, &[1, 6, 5]) };

    suite.expect("augment_disabled_is_identity", || Ok(augment(&s, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(1)) == s));
    suite.expect("hflip_twice_is_identity", || Ok(hflip(&hflip(&s.image)) == s.image));
    suite.expect("hflip_moves_pixel_to_mirror_column", || {
        let f = hflip(&s.mask);
        Ok((0..6).all(|r| (0..5).all(|c| f.get(&[0, r, c]) == s.mask.get(&[0, r, 4 - c]))))
    });
    suite.expect("binarize_examples", || {
        let z = Tensor::<f32>::new([4], vec![-1.0, 1.0, 0.0, 0.0])?;
        let r = rand_t(rng, &[64]);
        let want: Vec<bool> = r.data().iter().map(|v| *v > 0.0).collect();
        Ok(binarize(&z, 0.0) == [false, true, false, false] && binarize(&r, 0.0) == want)
    });
    suite.expect("confusion_examples", || {
        let truth = rand_bits(rng, 16, 0.4);
        let k = truth.iter().filter(|b| **b).count() as u64;
        let same = confusion(&truth, &truth)?;
        let inv: Vec<bool> = truth.iter().map(|b| !b).collect();
        let opp = confusion(&inv, &truth)?;
        let pred = rand_bits(rng, 16, 0.5);
        let (tp, fp, tn, fn_) = oracle::confusion(&pred, &truth);
        Ok(same == ConfusionCounts { tp: k, fp: 0, tn: 16 - k, fn_: 0 }
            && opp.tp == 0
            && opp.tn == 0
            && confusion(&pred, &truth)? == ConfusionCounts { tp, fp, tn, fn_ })
    });
    suite.expect("report_examples", || {
        let perfect = report(&ConfusionCounts { tp: 5, fp: 0, tn: 11, fn_: 0 });
        let half = report(&ConfusionCounts { tp: 1, fp: 1, tn: 13, fn_: 1 });
        Ok(perfect.values() == [1.0; 8] && half.dice == 0.5 && half.iou_p == 1.0 / 3.0)
    });
    suite.expect("pnm_round_trip_and_threshold", || {
        let img = pnm::PnmImage { width: 4, height: 3, channels: 3, pixels: (0..36).map(|i| (i * 7) as u8).collect() };
        let back = pnm::decode(&pnm::encode(&img))?;
        let gray = pnm::PnmImage { width: 2, height: 1, channels: 1, pixels: vec![127, 128] };
        let m = pnm::mask_tensor::<f32>(&gray);
        Ok(back == img && m.data() == [0.0, 1.0])
    });
    suite.expect("pnm_malformed_header_reports_offset", || {
        Ok(matches!(pnm::decode(b"P5\n4 x\n255\n"), Err(Error::Pnm { offset: 5, .. })))
    });
    suite.expect("resize_examples", || {
        let c = Tensor::<f32>::full([3, 4, 5], 0.25);
        let x = rand_t(rng, &[1, 3, 3]);
        let checker = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0])?;
        let up = resize_nearest(&checker, 4, 4);
        let want = oracle::resize_nearest(&checker.to_f64(), 1, 2, 2, 4, 4);
        Ok(resize_image(&c, 7, 3).data().iter().all(|v| (*v - 0.25).abs() < 1e-7)
            && resize_image(&x, 3, 3) == x
            && resize_nearest(&x, 3, 3) == x
            && all_close(&up, &want, 0.0))
    });
    suite.expect("split_examples", || {
        let (tr, va) = split_indices(10, 0.8, 5);
        let repeat = split_indices(10, 0.8, 5) == (tr.clone(), va.clone());
        let mut sets_ok = true;
        for n in [1usize, 7, 33, 100] {
            let (a, b) = split_indices(n, 0.8, n as u64);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            sets_ok &= all == (0..n).collect::<Vec<_>>();
        }
        Ok(tr.len() == 8 && va.len() == 2 && repeat && sets_ok)
    });
    suite.check("synthetic_examples", || {
        let spec = SyntheticSpec { count: 40, ..SyntheticSpec::default() };
        let data = synth_dataset(&spec);
        let in_range = data.iter().all(|s| (0.02..=0.5).contains(&foreground_fraction(s)));
        let empty = synth_dataset(&SyntheticSpec { count: 5, ellipses: (0, 0), ..spec.clone() });
        let all_zero = empty.iter().all(|s| s.mask.max_abs() == 0.0);
        let root = std::env::temp_dir().join(format!("dksg-selftest-{}", std::process::id()));
        let small = SyntheticSpec { count: 3, image_size: 32, ..spec };
        let files = |dir: &std::path::Path| -> Result<Vec<Vec<u8>>> {
            let mut out = Vec::new();
            for sub in ["images", "masks"] {
                let d = dir.join(sub);
                let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
                let mut names: Vec<_> =
                    entries.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().map_err(|e| Error::io(&d, e))?;
                names.sort();
                for p in names {
                    out.push(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
                }
            }
            Ok(out)
        };
        generate_synthetic(&small, &root.join("a"))?;
        generate_synthetic(&small, &root.join("b"))?;
        let identical = files(&root.join("a"))? == files(&root.join("b"))?;
        let _ = std::fs::remove_dir_all(&root);
        Ok((in_range && all_zero && identical, format!("fractions in range: {in_range}, empty masks: {all_zero}, identical on disk: {identical}")))
    });
}

/// Every worked example, in module order.
pub fn examples(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4a);
    let mut suite = Suite::default();
    tensor_examples(&mut suite, &mut rng);
    model_examples(&mut suite, &mut rng);
    loss_examples(&mut suite, &mut rng);
    data_examples(&mut suite, &mut rng);
    suite.checks
}
