//! Netpbm color images (`P6` binary, `P3` plain) as `H×W×3` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(detail: impl Into<String>) -> Error {
    Error::format("PPM image", detail)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let digits = &self.bytes[start..self.pos];
        if digits.is_empty() {
            return Err(bad(format!("expected {what} at byte {start}")));
        }
        std::str::from_utf8(digits)
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let plain = match bytes.get(..2) {
        Some(b"P6") => false,
        Some(b"P3") => true,
        _ => return Err(bad("expected P6 or P3 magic")),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("empty image {width}×{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| bad("image size overflows"))?;
    let maxf = maxval as f64;
    let mut data = Vec::new();
    if plain {
        // Each sample takes at least one byte, which bounds the allocation.
        if samples > bytes.len() {
            return Err(bad(format!("{samples} samples cannot fit in {} bytes", bytes.len())));
        }
        data.reserve(samples);
        for _ in 0..samples {
            let v = c.number("sample")?;
            if v > maxval {
                return Err(bad(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / maxf);
        }
        c.skip_space();
        if c.pos != bytes.len() {
            return Err(bad("trailing data"));
        }
    } else {
        match bytes.get(c.pos) {
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            _ => return Err(bad("missing whitespace before raster")),
        }
        let width_bytes = if maxval < 256 { 1 } else { 2 };
        let raster = &bytes[c.pos..];
        if Some(raster.len()) != samples.checked_mul(width_bytes) {
            return Err(bad(format!("raster is {} bytes, expected {samples}×{width_bytes}", raster.len())));
        }
        data.reserve(samples);
        for s in raster.chunks_exact(width_bytes) {
            let v = if width_bytes == 1 { s[0] as usize } else { u16::from_be_bytes([s[0], s[1]]) as usize };
            if v > maxval {
                return Err(bad(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / maxf);
        }
    }
    Tensor::new([height, width, 3], data)
}

/// Writes a binary `P6` with maxval 255, clamping to `[0, 1]` first.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(Error::shape("ppm::encode", format!("{:?} is not H×W×3", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

pub fn save(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_binary_agree() {
        let plain = b"P3\n# a comment\n2 1\n255\n255 0 0   0 128 255\n";
        let mut binary = b"P6 2 1 255\n".to_vec();
        binary.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
        let a = decode(plain).unwrap();
        let b = decode(&binary).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 2, 3]);
        assert_eq!(a.data()[4], 128.0 / 255.0);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x80, 0x00, 0x00, 0x00]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 32768.0 / 65535.0, 0.0]);
    }

    #[test]
    fn byte_exact_round_trip() {
        let img = Tensor::from_fn([3, 4, 3], |i| (i * 7 % 256) as f64 / 255.0);
        let bytes = encode(&img).unwrap();
        assert_eq!(decode(&bytes).unwrap(), img);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn rejects_malformed() {
        for case in [
            &b""[..],
            b"P5\n1 1\n255\n\0",
            b"P6\n0 1\n255\n",
            b"P6\n1 1\n0\n\0\0\0",
            b"P6\n1 1\n255\n\0\0",
            b"P6\n1 1\n255\n\0\0\0\0",
            b"P6\n1 1\n255",
            b"P3\n1 1\n10\n1 2 11\n",
            b"P3\n1 1\n255\n1 2\n",
            b"P3\n1 1\n255\n1 2 3 4\n",
            b"P3\n99999999999 99999999999\n255\n",
            b"P6\n99999999999999999999999 1\n255\n",
        ] {
            assert!(decode(case).is_err(), "{:?}", String::from_utf8_lossy(case));
        }
    }
}
