//! Geometric augmentation applied identically to image and mask.

use rand::Rng;

use super::{resize_image, resize_nearest, Sample};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Rotations by 90/180/270 degrees; 90 and 270 only on square inputs.
    pub rotate: bool,
    /// Random crop of at least `min_crop` of each side, resized back.
    pub crop: bool,
    /// Probability of applying each enabled transform.
    pub prob: f64,
    pub min_crop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rotate: true, crop: true, prob: 0.5, min_crop: 0.8 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { hflip: false, vflip: false, rotate: false, crop: false, ..Self::default() }
    }
}

fn remap<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<T> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for p in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                out.push(t.data()[(p * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new([c, oh, ow], out).expect("remap output sized by construction")
}

pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    remap(t, h, w, |y, x| (y, w - 1 - x))
}

pub fn vflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    remap(t, h, w, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by `quarter_turns · 90°`.
pub fn rot90<T: Scalar>(t: &Tensor<T>, quarter_turns: usize) -> Tensor<T> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    match quarter_turns % 4 {
        0 => t.clone(),
        1 => remap(t, w, h, |y, x| (x, w - 1 - y)),
        2 => remap(t, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(t, w, h, |y, x| (h - 1 - x, y)),
    }
}

pub fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<T> {
    remap(t, ch, cw, |y, x| (y0 + y, x0 + x))
}

/// Applies each enabled transform with probability `prob`, in the order
/// hflip, vflip, rotate, crop. Output has the input's spatial size.
pub fn augment<T: Scalar>(s: &Sample<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample<T> {
    let (mut image, mut mask) = (s.image.clone(), s.mask.clone());
    if cfg.hflip && rng.gen_bool(cfg.prob) {
        (image, mask) = (hflip(&image), hflip(&mask));
    }
    if cfg.vflip && rng.gen_bool(cfg.prob) {
        (image, mask) = (vflip(&image), vflip(&mask));
    }
    if cfg.rotate && rng.gen_bool(cfg.prob) {
        let square = image.shape()[1] == image.shape()[2];
        let k = if square { rng.gen_range(1..4) } else { 2 };
        (image, mask) = (rot90(&image, k), rot90(&mask, k));
    }
    if cfg.crop && rng.gen_bool(cfg.prob) {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let side = |n: usize, rng: &mut dyn rand::RngCore| {
            let lo = ((n as f64 * cfg.min_crop).ceil() as usize).clamp(1, n);
            rng.gen_range(lo..=n)
        };
        let (ch, cw) = (side(h, rng), side(w, rng));
        let (y0, x0) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
        image = resize_image(&crop(&image, y0, x0, ch, cw), h, w);
        mask = resize_nearest(&crop(&mask, y0, x0, ch, cw), h, w);
    }
    Sample { id: s.id.clone(), image, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_f64([1, h, w], &(0..h * w).map(|i| i as f64).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rotations_compose() {
        let t = grid(3, 3);
        assert_eq!(rot90(&rot90(&t, 1), 1), rot90(&t, 2));
        assert_eq!(rot90(&rot90(&t, 1), 3), t);
        assert_eq!(rot90(&t, 2), hflip(&vflip(&t)));
        // [[0,1,2],...] rotated counter-clockwise puts column 2 on top
        assert_eq!(&rot90(&t, 1).data()[..3], &[2.0, 5.0, 8.0]);
    }

    #[test]
    fn flips_are_involutions() {
        let t = grid(2, 5);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_eq!(vflip(&vflip(&t)), t);
    }

    #[test]
    fn image_and_mask_move_together() {
        let n = 8;
        let mut image = Tensor::<f32>::zeros([3, n, n]);
        let mut mask = Tensor::<f32>::zeros([1, n, n]);
        for (y, x) in [(1, 2), (1, 3), (2, 2)] {
            mask.set(&[0, y, x], 1.0);
            for c in 0..3 {
                image.set(&[c, y, x], 1.0);
            }
        }
        let s = Sample { id: "a".into(), image, mask };
        let cfg = AugmentConfig { crop: false, prob: 1.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = augment(&s, &cfg, &mut rng);
            assert_eq!(a.image.shape(), &[3, n, n]);
            assert_eq!(&a.image.data()[..n * n], a.mask.data());
        }
    }

    #[test]
    fn crop_keeps_size_and_binary_mask() {
        let s = Sample::<f32> { id: "a".into(), image: Tensor::full([3, 10, 6], 0.5), mask: Tensor::ones([1, 10, 6]) };
        let cfg = AugmentConfig { prob: 1.0, ..AugmentConfig::default() };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.image.shape(), &[3, 10, 6]);
        assert_eq!(a.mask.shape(), &[1, 10, 6]);
        assert!(a.mask.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn disabled_is_identity() {
        let s = Sample::<f32> { id: "a".into(), image: Tensor::full([3, 4, 4], 0.2), mask: Tensor::zeros([1, 4, 4]) };
        let a = augment(&s, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a, s);
    }
}
