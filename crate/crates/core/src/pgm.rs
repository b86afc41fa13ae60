//! Binary PGM (P5) reading and writing.
//!
//! Header is `P5`, width, height and maxval separated by whitespace (comments
//! starting with `#` are skipped), then exactly one whitespace byte and the
//! samples: one byte each when `maxval < 256`, otherwise big-endian `u16`.

use std::fs;
use std::path::Path;

use crate::raster::{BinaryMask, GrayImage};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("PGM format error: unexpected {token:?} ({reason})")]
    Format { token: String, reason: &'static str },
    #[error("PGM payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sample depth for written PGM files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<(), ImageError> {
    fs::write(path, encode_pgm(img, depth))?;
    Ok(())
}

/// Decodes a P5 byte stream, scaling samples by `1 / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let (width, height, maxval, payload) = parse_header(bytes)?;
    let n = width * height;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let expected = n * bytes_per;
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let scale = 1.0 / maxval as f64;
    let data = if bytes_per == 1 {
        payload[..n].iter().map(|&b| b as f64 * scale).collect()
    } else {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    GrayImage::from_vec(width, height, data)
}

/// Clamps to `[0, 1]` and quantizes by `round(v * maxval)`, halves rounding up.
pub fn encode_pgm(img: &GrayImage, depth: BitDepth) -> Vec<u8> {
    let maxval = depth.maxval();
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    let quant = |v: f64| -> u32 {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        ((v * maxval as f64 + 0.5).floor() as u32).min(maxval)
    };
    match depth {
        BitDepth::Eight => out.extend(img.data().iter().map(|&v| quant(v) as u8)),
        BitDepth::Sixteen => {
            for &v in img.data() {
                out.extend_from_slice(&(quant(v) as u16).to_be_bytes());
            }
        }
    }
    out
}

/// Masks are 8-bit PGMs holding 0 (background) and 255 (particle).
pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask, ImageError> {
    decode_mask(&fs::read(path)?)
}

/// Any stored sample at or above half scale reads back as particle.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, ImageError> {
    let img = decode_pgm(bytes)?;
    let data = img.data().iter().map(|&v| v >= 128.0 / 255.0 - 1e-12).collect();
    BinaryMask::from_vec(img.width(), img.height(), data)
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, u32, &[u8]), ImageError> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(ImageError::Format {
            token: magic,
            reason: "only binary P5 graymaps are supported",
        });
    }
    let width = parse_number(bytes, &mut pos, "width")?;
    let height = parse_number(bytes, &mut pos, "height")?;
    let maxval = parse_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Format {
            token: format!("{width}x{height}"),
            reason: "image dimensions must be positive",
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Format {
            token: maxval.to_string(),
            reason: "maxval must be in 1..=65535",
        });
    }
    // exactly one whitespace byte separates the header from the samples
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(&b) => {
            return Err(ImageError::Format {
                token: (b as char).to_string(),
                reason: "expected whitespace after maxval",
            })
        }
        None => {
            return Err(ImageError::Truncated {
                expected: width * height,
                actual: 0,
            })
        }
    }
    Ok((width, height, maxval as u32, &bytes[pos..]))
}

fn parse_number(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<usize, ImageError> {
    let tok = next_token(bytes, pos)?;
    tok.parse().map_err(|_| ImageError::Format {
        token: tok,
        reason: match what {
            "width" => "width is not a decimal integer",
            "height" => "height is not a decimal integer",
            _ => "maxval is not a decimal integer",
        },
    })
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Format {
            token: "<eof>".into(),
            reason: "header ended early",
        });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}
