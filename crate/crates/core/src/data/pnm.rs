//! Binary netpbm codec: P5 (graymap) and P6 (pixmap), 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

fn err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Pnm { offset, reason: reason.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| err(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err(0, "missing 'P' magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => return Err(err(1, format!("unsupported format P{}", other as char))),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(maxval_at, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(err(maxval_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(err(h.pos, "expected single whitespace before raster"));
    }
    let start = h.pos + 1;
    let need = width * height * channels;
    let have = bytes.len() - start;
    if have < need {
        return Err(err(bytes.len(), format!("raster truncated: {have} of {need} bytes")));
    }
    if have > need {
        return Err(err(start + need, format!("{} trailing bytes after raster", have - need)));
    }
    Ok(PnmImage { width, height, channels, pixels: bytes[start..].to_vec() })
}

pub fn encode(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: &Path, img: &PnmImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3,H,W]` image in `[0,1]` from a P6 (or P5, replicated to three channels).
pub fn image_tensor<T: Scalar>(img: &PnmImage) -> Tensor<T> {
    let plane = img.width * img.height;
    let mut data = vec![T::zero(); 3 * plane];
    for c in 0..3 {
        let src = if img.channels == 3 { c } else { 0 };
        for p in 0..plane {
            data[c * plane + p] = T::of(img.pixels[p * img.channels + src] as f64 / 255.0);
        }
    }
    Tensor::new([3, img.height, img.width], data).expect("buffer sized from header")
}

/// `[1,H,W]` binary mask: gray values ≥ 128 map to 1. Colour input uses the
/// first channel.
pub fn mask_tensor<T: Scalar>(img: &PnmImage) -> Tensor<T> {
    let data = img
        .pixels
        .iter()
        .step_by(img.channels)
        .map(|&v| if v >= 128 { T::one() } else { T::zero() })
        .collect();
    Tensor::new([1, img.height, img.width], data).expect("buffer sized from header")
}

/// P6 from a `[3,H,W]` tensor, or P5 from `[1,H,W]`; values in `[0,1]`.
pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<PnmImage> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("pnm", format!("expected [1|3,H,W], got {s:?}")));
    }
    let (channels, height, width) = (s[0], s[1], s[2]);
    let plane = height * width;
    let mut pixels = vec![0u8; channels * plane];
    for c in 0..channels {
        for p in 0..plane {
            pixels[p * channels + c] = to_byte(t.data()[c * plane + p]);
        }
    }
    Ok(PnmImage { width, height, channels, pixels })
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(image_tensor(&read(path)?))
}

pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(mask_tensor(&read(path)?))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write(path, &from_tensor(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mask_threshold_boundary() {
        let img = PnmImage { width: 2, height: 1, channels: 1, pixels: vec![127, 128] };
        let m: Tensor<f32> = mask_tensor(&decode(&encode(&img)).unwrap());
        assert_eq!(m.data(), &[0.0, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1 # trailing\n255\n\x01\x02";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height, img.pixels.clone()), (2, 1, vec![1, 2]));
    }

    #[test]
    fn malformed_header_reports_offset() {
        match decode(b"P6\n12 x\n255\n") {
            Err(Error::Pnm { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode(b"P3\n1 1\n255\n"), Err(Error::Pnm { offset: 1, .. })));
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00"), Err(Error::Pnm { .. })));
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip(w in 1usize..6, h in 1usize..6, rgb in any::<bool>(), raw in proptest::collection::vec(any::<u8>(), 75)) {
            let channels = if rgb { 3 } else { 1 };
            let pixels = raw[..w * h * channels].to_vec();
            let img = PnmImage { width: w, height: h, channels, pixels };
            let bytes = encode(&img);
            prop_assert_eq!(&decode(&bytes).unwrap(), &img);
            // through the float tensor and back
            if rgb {
                let t: Tensor<f32> = image_tensor(&img);
                prop_assert_eq!(encode(&from_tensor(&t).unwrap()), bytes);
            }
        }
    }
}
