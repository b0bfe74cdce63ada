//! Brute-force reference implementations.
//!
//! Straight nested loops over `f64` buffers, written without the tape or the
//! GEMM kernels, so they can check those paths independently. Shapes follow
//! the same conventions as [`Tensor`](crate::Tensor). Used by the unit tests,
//! the acceptance suite and `dksg selftest`.

/// Direct-summation convolution. `x: [n,ci,h,w]`, `w: [co,ci,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, ci, h, w_): (usize, usize, usize, usize),
    w: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w_ + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x_ in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as i64 - pad as i64;
                                let ix = (x_ * stride + j) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w_ as i64 {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + iy as usize) * w_ + ix as usize];
                                let wv = w[((o * ci + c) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + x_] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear sample of one `h×w` plane at output pixel `(oy, ox)` of an
/// `oh×ow` grid, half-pixel centres, clamped at the border.
fn bilinear_at(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let sy = (((oy as f64) + 0.5) * (h as f64) / (oh as f64) - 0.5).max(0.0);
    let sx = (((ox as f64) + 0.5) * (w as f64) / (ow as f64) - 0.5).max(0.0);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
    let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
    let dy = if y1 == y0 { 0.0 } else { sy - y0 as f64 };
    let dx = if x1 == x0 { 0.0 } else { sx - x0 as f64 };
    let p = |y: usize, x: usize| plane[y * w + x];
    p(y0, x0) * (1.0 - dy) * (1.0 - dx)
        + p(y0, x1) * (1.0 - dy) * dx
        + p(y1, x0) * dy * (1.0 - dx)
        + p(y1, x1) * dy * dx
}

/// Per-pixel bilinear resize of `planes` stacked `h×w` planes.
pub fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(bilinear_at(plane, h, w, oh, ow, oy, ox));
            }
        }
    }
    out
}

/// Nearest-neighbour resize (pixel-centre rule).
pub fn resize_nearest(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oy in 0..oh {
            let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
            for ox in 0..ow {
                let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
                out.push(x[(p * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Mean of each `[h·w]` plane.
pub fn global_avg_pool(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// `x·W + b` for row-major `x: [m,k]`, `W: [k,n]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = matmul(x, w, m, k, n);
    for i in 0..m {
        for j in 0..n {
            y[i * n + j] += b[j];
        }
    }
    y
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let denom: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / denom).collect()
}

/// `softmax(Q·Kᵀ/√d_k)·V` for one sequence; `q,k: [len, d_k]`, `v: [len, d_v]`.
/// Returns `(output, weights)`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], len: usize, d_k: usize, d_v: usize) -> (Vec<f64>, Vec<f64>) {
    let mut weights = Vec::with_capacity(len * len);
    for i in 0..len {
        let logits: Vec<f64> = (0..len)
            .map(|j| (0..d_k).map(|c| q[i * d_k + c] * k[j * d_k + c]).sum::<f64>() / (d_k as f64).sqrt())
            .collect();
        weights.extend(softmax(&logits));
    }
    let mut out = vec![0.0; len * d_v];
    for i in 0..len {
        for j in 0..len {
            for c in 0..d_v {
                out[i * d_v + c] += weights[i * len + j] * v[j * d_v + c];
            }
        }
    }
    (out, weights)
}

/// Two-layer perceptron `relu(g·W1 + b1)·W2 + b2` for one vector.
pub fn mlp(g: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], hidden: usize, out: usize) -> Vec<f64> {
    let d = g.len();
    let h: Vec<f64> = (0..hidden)
        .map(|j| relu(b1[j] + (0..d).map(|i| g[i] * w1[i * hidden + j]).sum::<f64>()))
        .collect();
    (0..out)
        .map(|j| b2[j] + (0..hidden).map(|i| h[i] * w2[i * out + j]).sum::<f64>())
        .collect()
}

/// Lesion-aware aggregate for one sample: `d: [c, h, w]`, coarse logits
/// `prev: [h/2, w/2]`; returns `A[c] = Σ_hw d·σ(up(prev)) / (h·w)`.
pub fn assemble(d: &[f64], c: usize, h: usize, w: usize, prev: &[f64]) -> Vec<f64> {
    let (ph, pw) = (h / 2, w / 2);
    let mut a = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let p = sigmoid(bilinear_at(prev, ph, pw, h, w, y, x));
            for ch in 0..c {
                a[ch] += d[(ch * h + y) * w + x] * p;
            }
        }
    }
    a.iter().map(|v| v / (h * w) as f64).collect()
}

/// Gated kernel update for one sample. Returns `(new_kernel, gate)`.
///
/// `split_w: [c, 2c]`, `split_b: [2c]`, `gate_w: [c, c]`, `gate_b: [c]`.
pub fn kernel_update(
    a: &[f64],
    k_prev: &[f64],
    split_w: &[f64],
    split_b: &[f64],
    gate_w: &[f64],
    gate_b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = a.len();
    let mut feat = vec![0.0; c];
    let mut gate_in = vec![0.0; c];
    for j in 0..2 * c {
        let mut s = split_b[j];
        for i in 0..c {
            s += a[i] * split_w[i * 2 * c + j];
        }
        if j < c {
            feat[j] = s;
        } else {
            gate_in[j - c] = s;
        }
    }
    let prod: Vec<f64> = (0..c).map(|i| gate_in[i] * k_prev[i]).collect();
    let mut gate = vec![0.0; c];
    for j in 0..c {
        let mut s = gate_b[j];
        for i in 0..c {
            s += prod[i] * gate_w[i * c + j];
        }
        gate[j] = sigmoid(s);
    }
    let k = (0..c).map(|i| gate[i] * feat[i] + (1.0 - gate[i]) * k_prev[i]).collect();
    (k, gate)
}

/// `logits[h,w] = Σ_c k[c]·d[c,h,w] + bias` for one sample.
pub fn predict(d: &[f64], k: &[f64], hw: usize, bias: f64) -> Vec<f64> {
    (0..hw)
        .map(|p| bias + k.iter().enumerate().map(|(c, kc)| kc * d[c * hw + p]).sum::<f64>())
        .collect()
}

/// Mean per-pixel BCE from logits, computed from probabilities directly.
pub fn bce(logits: &[f64], target: &[f64]) -> f64 {
    logits
        .iter()
        .zip(target)
        .map(|(z, t)| {
            let p = sigmoid(*z);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / logits.len() as f64
}

/// Soft Dice loss averaged over `batch` equal chunks.
pub fn dice(logits: &[f64], target: &[f64], batch: usize, eps: f64) -> f64 {
    let per = logits.len() / batch;
    (0..batch)
        .map(|b| {
            let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
            for i in b * per..(b + 1) * per {
                let p = sigmoid(logits[i]);
                inter += p * target[i];
                ps += p;
                ts += target[i];
            }
            1.0 - (2.0 * inter + eps) / (ps + ts + eps)
        })
        .sum::<f64>()
        / batch as f64
}

/// Exhaustive `(tp, fp, tn, fn)` tally over two boolean masks.
pub fn confusion(pred: &[bool], truth: &[bool]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// The eight report columns straight from the definitions, `0/0 = 1`:
/// recall, specificity, precision, Dice, IoU_p, IoU_b, mIoU, accuracy.
pub fn metrics(tp: u64, fp: u64, tn: u64, fn_: u64) -> [f64; 8] {
    let frac = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let iou_p = frac(tp, tp + fp + fn_);
    let iou_b = frac(tn, tn + fp + fn_);
    [
        frac(tp, tp + fn_),
        frac(tn, tn + fp),
        frac(tp, tp + fp),
        frac(2 * tp, 2 * tp + fp + fn_),
        iou_p,
        iou_b,
        (iou_p + iou_b) / 2.0,
        frac(tp + tn, tp + fp + tn + fn_),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_and_box() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(conv2d(&x, (1, 1, 2, 2), &[1.0], (1, 1, 1), None, 1, 0), x.to_vec());
        // every 3x3 window around a 2x2 image covers all four pixels
        let boxed = conv2d(&x, (1, 1, 2, 2), &[1.0; 9], (1, 3, 3), None, 1, 1);
        assert_eq!(boxed, vec![10.0; 4]);
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax(&[0.0, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }
}
