//! Image/mask pairs on disk, resizing and train/validation splits.
//!
//! A dataset root holds `images/<id>.ppm` and `masks/<id>.pgm`.

pub mod augment;
pub mod pnm;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T = f32> {
    pub id: String,
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<T>,
    /// `[1,H,W]`, values in `{0,1}`.
    pub mask: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Bilinear for the image, nearest-neighbour for the mask.
    pub fn resized(&self, h: usize, w: usize) -> Sample<T> {
        if (self.height(), self.width()) == (h, w) {
            return self.clone();
        }
        Sample {
            id: self.id.clone(),
            image: resize_image(&self.image, h, w),
            mask: resize_nearest(&self.mask, h, w),
        }
    }
}

/// Bilinear resize of a `[C,H,W]` tensor.
pub fn resize_image<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = t.shape();
    let data = resize_bilinear(t.data(), s[0], s[1], s[2], oh, ow);
    Tensor::new([s[0], oh, ow], data).expect("resize output sized by construction")
}

/// Nearest-neighbour resize of a `[C,H,W]` tensor: output pixel `o` reads
/// source pixel `floor((o + ½)·in/out)`.
pub fn resize_nearest<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = |o: usize, out: usize, inp: usize| ((2 * o + 1) * inp / (2 * out)).min(inp - 1);
    let mut data = Vec::with_capacity(c * oh * ow);
    for p in 0..c {
        for oy in 0..oh {
            let sy = src(oy, oh, h);
            for ox in 0..ow {
                data.push(t.data()[(p * h + sy) * w + src(ox, ow, w)]);
            }
        }
    }
    Tensor::new([c, oh, ow], data).expect("resize output sized by construction")
}

fn sorted_ids(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every `images/<id>.ppm` with its `masks/<id>.pgm`, sorted by id.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<Sample<T>>> {
    let ids = sorted_ids(&root.join("images"), "ppm")?;
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.join("images").display())));
    }
    ids.into_iter().map(|id| load_sample(root, &id)).collect()
}

pub fn load_sample<T: Scalar>(root: &Path, id: &str) -> Result<Sample<T>> {
    let image = pnm::load_image(&root.join("images").join(format!("{id}.ppm")))?;
    let mask_path = root.join("masks").join(format!("{id}.pgm"));
    if !mask_path.exists() {
        return Err(Error::Dataset(format!("image `{id}` has no mask at {}", mask_path.display())));
    }
    let mask: Tensor<T> = pnm::load_mask(&mask_path)?;
    if mask.shape()[1..] != image.shape()[1..] {
        return Err(Error::Dataset(format!(
            "`{id}`: image is {:?} but mask is {:?}",
            &image.shape()[1..],
            &mask.shape()[1..]
        )));
    }
    Ok(Sample { id: id.to_string(), image, mask })
}

pub fn save_sample<T: Scalar>(root: &Path, sample: &Sample<T>) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    pnm::write_tensor(&root.join("images").join(format!("{}.ppm", sample.id)), &sample.image)?;
    pnm::write_tensor(&root.join("masks").join(format!("{}.pgm", sample.id)), &sample.mask)
}

/// Seeded shuffle of `0..n` cut into `(train, val)` index lists, with
/// `round(n·train_frac)` training items.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_frac.clamp(0.0, 1.0)).round() as usize).min(n);
    let val = idx.split_off(n_train);
    (idx, val)
}

pub fn split<S: Clone>(items: &[S], train_frac: f64, seed: u64) -> (Vec<S>, Vec<S>) {
    let (tr, va) = split_indices(items.len(), train_frac, seed);
    (tr.iter().map(|&i| items[i].clone()).collect(), va.iter().map(|&i| items[i].clone()).collect())
}

/// Stacks samples into `([N,3,H,W], [N,1,H,W])`.
pub fn batch<T: Scalar>(samples: &[&Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(10, 0.8, 7);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 7), (a.clone(), b.clone()));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(split_indices(10, 0.8, 8).0, a);
    }

    #[test]
    fn nearest_matches_oracle() {
        let v: Vec<f64> = (0..35).map(|i| i as f64).collect();
        let t = Tensor::<f64>::from_f64([1, 5, 7], &v).unwrap();
        for (oh, ow) in [(3, 4), (10, 14), (5, 7), (8, 3)] {
            let got = resize_nearest(&t, oh, ow);
            assert_eq!(got.data(), oracle::resize_nearest(&v, 1, 5, 7, oh, ow).as_slice());
        }
    }

    #[test]
    fn resized_mask_stays_binary() {
        let mask = Tensor::<f32>::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = Sample { id: "x".into(), image: Tensor::full([3, 2, 2], 0.5), mask };
        let r = s.resized(5, 3);
        assert_eq!(r.image.shape(), &[3, 5, 3]);
        assert!(r.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut image = Tensor::<f32>::zeros([3, 2, 3]);
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = (i * 13 % 256) as f32 / 255.0;
        }
        let mask = Tensor::from_f64([1, 2, 3], &[0., 1., 1., 0., 0., 1.]).unwrap();
        let s = Sample { id: "a1".into(), image, mask };
        save_sample(dir.path(), &s).unwrap();
        let back: Vec<Sample<f32>> = load_dataset(dir.path()).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn missing_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = Sample::<f32> { id: "z".into(), image: Tensor::zeros([3, 1, 1]), mask: Tensor::zeros([1, 1, 1]) };
        save_sample(dir.path(), &s).unwrap();
        std::fs::remove_file(dir.path().join("masks/z.pgm")).unwrap();
        assert!(matches!(load_dataset::<f32>(dir.path()), Err(Error::Dataset(_))));
    }
}
