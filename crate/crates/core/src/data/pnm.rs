//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Decode {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(decode_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| decode_err(start, format!("{what} out of range")))
    }
}

/// Decode to `[c, h, w]` with values `byte / 255`; `c` is 3 for `P6` and
/// 1 for `P5`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(decode_err(0, "bad magic: expected P5 or P6")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(decode_err(
            max_at,
            format!("maxval {maxval} unsupported; only 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(decode_err(2, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(decode_err(h.pos, "expected whitespace before pixel data")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| decode_err(2, "image dimensions overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(decode_err(
            bytes.len(),
            format!("truncated pixel data: {} of {need} bytes", payload.len()),
        ));
    }
    // Interleaved RGB to planar.
    let plane = width * height;
    let mut data = vec![0.0; need];
    for (i, &b) in payload[..need].iter().enumerate() {
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * plane + pixel] = b as f64 / 255.0;
    }
    Tensor::from_vec(vec![channels, height, width], data)
}

fn encode(img: &Tensor, magic: &str, channels: usize) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(Error::dim(format!(
                "expected an image [c, h, w], got {s:?}"
            )))
        }
    };
    if c != channels {
        return Err(Error::dim(format!(
            "{magic} needs {channels} channels, got {c}"
        )));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for pixel in 0..plane {
        for ch in 0..c {
            let v = img.data()[ch * plane + pixel];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Encode a `[3, h, w]` image in `[0, 1]` as `P6`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    encode(img, "P6", 3)
}

/// Encode a `[1, h, w]` image in `[0, 1]` as `P5`.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    encode(img, "P5", 1)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Write as `P6` or `P5` depending on the channel count.
pub fn write_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if img.shape().first() == Some(&1) {
        encode_pgm(img)?
    } else {
        encode_ppm(img)?
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_two_by_two() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend(0u8..12);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        // Red plane holds bytes 0, 3, 6, 9.
        assert_eq!(t.data()[..4], [0.0, 3.0 / 255.0, 6.0 / 255.0, 9.0 / 255.0]);
    }

    #[test]
    fn p5_single_white_pixel() {
        let t = decode_image(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(t.shape(), &[1, 1, 1]);
        assert_eq!(t.data(), &[1.0]);
    }

    #[test]
    fn comments_in_header() {
        let t = decode_image(b"P5\n# made by hand\n2 1\n255\n\x00\x80").unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        assert!(matches!(
            decode_image(b"P3 1 1 255\n"),
            Err(Error::Decode { offset: 0, .. })
        ));
        assert!(matches!(
            decode_image(b"P5 1 1 65535\n\x00\x00"),
            Err(Error::Decode { offset: 6, .. })
        ));
        assert!(matches!(
            decode_image(b"P6 2 2 255\n\x00\x01"),
            Err(Error::Decode { offset: 13, .. })
        ));
        assert!(matches!(decode_image(b"P6"), Err(Error::Decode { .. })));
        assert!(matches!(decode_image(b""), Err(Error::Decode { .. })));
    }

    #[test]
    fn encode_round_trip() {
        let bytes = (0u8..=255).collect::<Vec<_>>();
        let img = Tensor::from_vec(
            vec![3, 4, 4],
            bytes[..48].iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .unwrap();
        assert_eq!(decode_image(&encode_ppm(&img).unwrap()).unwrap(), img);
    }
}
