//! Binary PPM (P6, maxval 255) codec.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Round-half-up 8-bit quantization of a [0, 1] value.
pub fn quantize(v: f64) -> Result<u8> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!("cannot quantize {v}")));
    }
    Ok((v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
}

/// Snaps every value onto the 8-bit grid.
pub fn quantize_image(img: &Tensor) -> Result<Tensor> {
    let data = img
        .data()
        .iter()
        .map(|&v| quantize(v).map(|q| f64::from(q) / 255.0))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(img.shape().to_vec(), data)
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in img.data() {
        out.push(quantize(v)?);
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
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
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut hdr = Header { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(hdr.err("missing P6 magic"));
    }
    hdr.pos = 2;
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} at byte {maxval_at}; only 255 is supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(hdr.err("zero image extent"));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(hdr.err("expected a single whitespace byte before the payload")),
    }
    let need = width * height * 3;
    let payload = &bytes[hdr.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Parse {
            offset: hdr.pos + need,
            msg: format!("{} trailing bytes after payload", payload.len() - need),
        });
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new([height, width, 3], data)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(img)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
