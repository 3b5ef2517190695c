//! File formats: raw tensor dumps with a JSON sidecar, and binary netpbm
//! (P5 grayscale, P6 RGB) images.
//!
//! A tensor dump `foo.bin` holds the values as little-endian IEEE-754 in
//! (batch, channel, height, width) order; `foo.json` next to it records
//! shape, precision and byte order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: [usize; 4],
    pub precision: String,
    pub byte_order: String,
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> (TensorHeader, Vec<u8>) {
    let mut bytes = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    let header = TensorHeader {
        shape: t.shape().dims(),
        precision: T::PRECISION.to_string(),
        byte_order: "little".to_string(),
    };
    (header, bytes)
}

pub fn decode_tensor<T: Scalar>(header: &TensorHeader, bytes: &[u8]) -> Result<Tensor<T>> {
    if header.precision != T::PRECISION {
        return Err(Error::Format(format!(
            "tensor precision {} cannot be read as {}",
            header.precision,
            T::PRECISION
        )));
    }
    if header.byte_order != "little" {
        return Err(Error::Format(format!("unsupported byte order {}", header.byte_order)));
    }
    let shape = Shape::from(header.shape);
    let width = std::mem::size_of::<T>();
    if bytes.len() != shape.numel() * width {
        return Err(Error::Format(format!(
            "expected {} bytes for shape {shape}, found {}",
            shape.numel() * width,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let (header, bytes) = encode_tensor(t);
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)? + "\n")?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let header: TensorHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    decode_tensor(&header, &fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Netpbm {
    Gray {
        width: usize,
        height: usize,
        pixels: Vec<u8>,
    },
    Rgb {
        width: usize,
        height: usize,
        pixels: Vec<u8>,
    },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected a number at byte {start}")))
    }
}

pub fn parse_netpbm(bytes: &[u8]) -> Result<Netpbm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("only binary PGM (P5) and PPM (P6) are supported".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("image has zero size".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = cur.pos + 1;
    let len = width * height * channels;
    let pixels = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Format(format!("raster truncated: need {len} bytes")))?
        .to_vec();
    Ok(if channels == 1 {
        Netpbm::Gray { width, height, pixels }
    } else {
        Netpbm::Rgb { width, height, pixels }
    })
}

pub fn read_netpbm(path: &Path) -> Result<Netpbm> {
    parse_netpbm(&fs::read(path)?)
}

fn encode_netpbm(magic: &str, width: usize, height: usize, comments: &[&str], pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() + 64);
    let _ = writeln!(out, "{magic}");
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = write!(out, "{width} {height}\n255\n");
    out.extend_from_slice(pixels);
    out
}

pub fn encode_pgm(width: usize, height: usize, comments: &[&str], pixels: &[u8]) -> Vec<u8> {
    encode_netpbm("P5", width, height, comments, pixels)
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    encode_netpbm("P6", width, height, &[], pixels)
}
