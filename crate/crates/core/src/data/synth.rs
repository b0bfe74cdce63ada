//! Procedural polyp-like images: soft pink ellipses on darker tissue.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_sample, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    /// Inclusive range of ellipses per image. `(0, 0)` gives empty masks.
    pub ellipses: (usize, usize),
    /// Semi-axis range as a fraction of the image size.
    pub axis_range: (f64, f64),
    pub fg_noise: f64,
    pub bg_noise: f64,
    /// Accepted foreground fraction; images outside are redrawn.
    pub fg_fraction: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 500,
            image_size: 64,
            ellipses: (1, 3),
            axis_range: (0.08, 0.3),
            fg_noise: 0.08,
            bg_noise: 0.06,
            fg_fraction: (0.02, 0.5),
            seed: 0,
        }
    }
}

/// Rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalised radius at a point: below 1 inside, above 1 outside.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        (u * u + v * v).sqrt()
    }

    /// Whether the centre of pixel `(row, col)` lies strictly inside.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.radius(col as f64 + 0.5, row as f64 + 0.5) < 1.0
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub sample: Sample<f32>,
    pub ellipses: Vec<Ellipse>,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Low-frequency texture: a few random plane waves summed.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut impl Rng, size: usize, amplitude: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let freq = rng.gen_range(1.5..6.0) / size as f64;
                let dir = rng.gen_range(0.0..PI);
                (2.0 * PI * freq * dir.cos(), 2.0 * PI * freq * dir.sin(), rng.gen_range(0.0..2.0 * PI), amplitude / 2.0)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin()).sum()
    }
}

fn blur3(plane: &[f64], n: usize) -> Vec<f64> {
    let k = [1.0, 2.0, 1.0];
    let at = |y: isize, x: isize| plane[y.clamp(0, n as isize - 1) as usize * n + x.clamp(0, n as isize - 1) as usize];
    let mut out = vec![0.0; n * n];
    for y in 0..n as isize {
        for x in 0..n as isize {
            let mut acc = 0.0;
            for (i, ky) in k.iter().enumerate() {
                for (j, kx) in k.iter().enumerate() {
                    acc += ky * kx * at(y + i as isize - 1, x + j as isize - 1);
                }
            }
            out[y as usize * n + x as usize] = acc / 16.0;
        }
    }
    out
}

fn draw_ellipses(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Ellipse> {
    let n = spec.image_size as f64;
    let count = rng.gen_range(spec.ellipses.0..=spec.ellipses.1);
    (0..count)
        .map(|_| {
            let a = rng.gen_range(spec.axis_range.0..=spec.axis_range.1) * n;
            let b = rng.gen_range(spec.axis_range.0..=spec.axis_range.1) * n;
            let margin = 0.5 * a.min(b);
            Ellipse {
                cx: rng.gen_range(margin..n - margin),
                cy: rng.gen_range(margin..n - margin),
                a,
                b,
                theta: rng.gen_range(0.0..PI),
            }
        })
        .collect()
}

fn mask_of(ellipses: &[Ellipse], n: usize) -> Vec<bool> {
    (0..n * n).map(|p| ellipses.iter().any(|e| e.contains_pixel(p / n, p % n))).collect()
}

/// The `index`-th image of a spec. Each image has its own RNG stream, so
/// samples do not depend on how many came before.
pub fn synth_sample(spec: &SyntheticSpec, index: usize) -> SyntheticSample {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let empty = spec.ellipses.1 == 0;
    let (ellipses, mask) = loop {
        let e = draw_ellipses(spec, &mut rng);
        let m = mask_of(&e, n);
        let frac = m.iter().filter(|b| **b).count() as f64 / (n * n) as f64;
        if empty || (spec.fg_fraction.0..=spec.fg_fraction.1).contains(&frac) {
            break (e, m);
        }
    };

    let bg_base = [rng.gen_range(0.30..0.45), rng.gen_range(0.12..0.22), rng.gen_range(0.10..0.18)];
    let fg_base = [rng.gen_range(0.80..0.95), rng.gen_range(0.45..0.60), rng.gen_range(0.50..0.65)];
    let bg_tex = Texture::new(&mut rng, n, 2.0 * spec.bg_noise);
    let fg_tex = Texture::new(&mut rng, n, 2.0 * spec.fg_noise);

    let mut planes = vec![vec![0.0; n * n]; 3];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = ellipses.iter().map(|e| e.radius(px, py)).fold(f64::INFINITY, f64::min);
            let alpha = 1.0 - smoothstep(0.9, 1.1, r);
            // brighter towards the centre of a polyp
            let shade = 1.0 + 0.1 * (1.0 - r.min(1.0));
            let (bt, ft) = (bg_tex.at(px, py), fg_tex.at(px, py));
            let (bn, fnoise): (f64, f64) =
                (rng.gen_range(-1.0..1.0) * spec.bg_noise, rng.gen_range(-1.0..1.0) * spec.fg_noise);
            for c in 0..3 {
                let bg = bg_base[c] + bt + bn;
                let fg = fg_base[c] * shade + ft + fnoise;
                planes[c][y * n + x] = alpha * fg + (1.0 - alpha) * bg;
            }
        }
    }
    let mut image = Vec::with_capacity(3 * n * n);
    for p in &planes {
        image.extend(blur3(p, n).into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    let mask: Vec<f32> = mask.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
    // quantise through 8 bits so in-memory samples equal what is written to disk
    let image: Vec<f32> = image.into_iter().map(|v| (v * 255.0).round() / 255.0).collect();
    SyntheticSample {
        sample: Sample {
            id: format!("{index:05}"),
            image: Tensor::new([3, n, n], image).expect("sized by construction"),
            mask: Tensor::new([1, n, n], mask).expect("sized by construction"),
        },
        ellipses,
    }
}

/// All samples of a spec, in memory.
pub fn synth_dataset(spec: &SyntheticSpec) -> Vec<Sample<f32>> {
    (0..spec.count).map(|i| synth_sample(spec, i).sample).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthStats {
    pub count: usize,
    pub mean_foreground: f64,
}

pub fn foreground_fraction(s: &Sample<f32>) -> f64 {
    s.mask.data().iter().filter(|v| **v > 0.5).count() as f64 / s.mask.numel() as f64
}

/// Writes the dataset under `out` in the standard layout.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<SynthStats> {
    if spec.image_size == 0 || spec.ellipses.0 > spec.ellipses.1 {
        return Err(Error::Dataset("invalid synthetic spec".into()));
    }
    let mut total = 0.0;
    for i in 0..spec.count {
        let s = synth_sample(spec, i).sample;
        total += foreground_fraction(&s);
        save_sample(out, &s)?;
    }
    Ok(SynthStats { count: spec.count, mean_foreground: if spec.count > 0 { total / spec.count as f64 } else { 0.0 } })
}
