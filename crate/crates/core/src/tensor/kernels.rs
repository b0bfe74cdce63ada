//! Raw forward/backward kernels over contiguous buffers.
//!
//! Everything here is shape-checked by the caller. Work is split per batch
//! sample; per-sample partial results are always reduced in sample order so
//! the output does not depend on how many worker threads ran.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DKSG_THREADS";

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1);
        if threads <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("dksg-worker-{i}"))
            .build()
            .ok()
    })
    .as_ref()
}

/// Number of worker threads kernels may use.
pub fn worker_threads() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

/// Maps `f` over `0..n`, in parallel when a worker pool is configured.
/// Results come back in index order.
pub fn map_samples<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match pool() {
        Some(p) if n > 1 => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).map(f).collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for r in 0..oh {
                    let ih = (r * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[r * ow..(r + 1) * ow];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (c, out) in line.iter_mut().enumerate() {
                        let iw = (c * g.stride + kj) as isize - g.pad as isize;
                        *out = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for r in 0..oh {
                    let ih = (r * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for c in 0..ow {
                        let iw = (c * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[iw as usize] += src[r * ow + c];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_per = g.c_in * g.h * g.w;
    let patch = g.patch();
    let per_sample = map_samples(g.batch, |n| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let mut out = vec![T::zero(); g.c_out * plane];
        if let Some(b) = bias {
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            T::gemm(g.c_out, patch, plane, w, (patch, 1), xn, (plane, 1), beta, &mut out, (plane, 1));
        } else {
            let mut cols = vec![T::zero(); patch * plane];
            im2col(xn, g, &mut cols);
            T::gemm(g.c_out, patch, plane, w, (patch, 1), &cols, (plane, 1), beta, &mut out, (plane, 1));
        }
        out
    });
    per_sample.concat()
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let plane = g.out_h() * g.out_w();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * plane;
    let patch = g.patch();
    let partials = map_samples(g.batch, |n| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let dyn_ = &dy[n * out_per..(n + 1) * out_per];
        let mut dw = vec![T::zero(); g.c_out * patch];
        let owned_cols;
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            let mut c = vec![T::zero(); patch * plane];
            im2col(xn, g, &mut c);
            owned_cols = c;
            &owned_cols
        };
        // dW = dY · colsᵀ
        T::gemm(g.c_out, plane, patch, dyn_, (plane, 1), cols, (1, plane), T::zero(), &mut dw, (patch, 1));
        let db: Vec<T> = dyn_
            .chunks(plane)
            .map(|row| T::of(row.iter().map(|v| v.as_f64()).sum()))
            .collect();
        let dx = need_dx.then(|| {
            // dcols = Wᵀ · dY
            let mut dcols = vec![T::zero(); patch * plane];
            T::gemm(patch, g.c_out, plane, w, (1, patch), dyn_, (plane, 1), T::zero(), &mut dcols, (plane, 1));
            if g.is_pointwise() {
                dcols
            } else {
                let mut dx = vec![T::zero(); in_per];
                col2im(&dcols, g, &mut dx);
                dx
            }
        });
        (dx, dw, db)
    });
    let mut dw = vec![T::zero(); g.c_out * patch];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_per));
    for (dxn, dwn, dbn) in partials {
        for (a, b) in dw.iter_mut().zip(&dwn) {
            *a += *b;
        }
        for (a, b) in db.iter_mut().zip(&dbn) {
            *a += *b;
        }
        if let (Some(acc), Some(part)) = (dx.as_mut(), dxn) {
            acc.extend_from_slice(&part);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Resizes each `h×w` plane in `x` to `oh×ow`.
pub fn resize_bilinear<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (r, rt) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::of(1.0 - rt.frac), T::of(rt.frac));
            let top = &src[rt.lo * w..(rt.lo + 1) * w];
            let bot = &src[rt.hi * w..(rt.hi + 1) * w];
            for (c, ct) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::of(1.0 - ct.frac), T::of(ct.frac));
                let t = top[ct.lo] * wc0 + top[ct.hi] * wc1;
                let b = bot[ct.lo] * wc0 + bot[ct.hi] * wc1;
                dst[r * ow + c] = t * wr0 + b * wr1;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (r, rt) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::of(1.0 - rt.frac), T::of(rt.frac));
            for (c, ct) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::of(1.0 - ct.frac), T::of(ct.frac));
                let g = src[r * ow + c];
                dst[rt.lo * w + ct.lo] += g * wr0 * wc0;
                dst[rt.lo * w + ct.hi] += g * wr0 * wc1;
                dst[rt.hi * w + ct.lo] += g * wr1 * wc0;
                dst[rt.hi * w + ct.hi] += g * wr1 * wc1;
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_factor_two() {
        let taps = bilinear_taps(2, 4);
        // output 0 clamps to the first pixel; output 1 sits at 0.25.
        assert_eq!((taps[0].lo, taps[0].frac), (0, 0.0));
        assert_eq!((taps[1].lo, taps[1].hi), (0, 1));
        assert!((taps[1].frac - 0.25).abs() < 1e-12);
        assert!((taps[2].frac - 0.75).abs() < 1e-12);
        assert_eq!((taps[3].lo, taps[3].hi), (1, 1));
    }

    #[test]
    fn pointwise_and_im2col_paths_agree() {
        let g = ConvGeom { batch: 2, c_in: 3, h: 4, w: 5, c_out: 2, kh: 1, kw: 1, stride: 1, pad: 0 };
        let x: Vec<f64> = (0..2 * 3 * 20).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let fast = conv2d_forward(&x, &w, None, &g);
        let mut cols = vec![0.0; 3 * 20];
        let mut slow = Vec::new();
        for n in 0..2 {
            im2col(&x[n * 60..(n + 1) * 60], &g, &mut cols);
            assert_eq!(&cols[..], &x[n * 60..(n + 1) * 60]);
            let mut out = vec![0.0; 40];
            f64::gemm(2, 3, 20, &w, (3, 1), &cols, (20, 1), 0.0, &mut out, (20, 1));
            slow.extend(out);
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert!(sigmoid(-1000.0f32) >= 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }
}
