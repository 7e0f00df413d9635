//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use super::bytes::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    /// Offset of the first raster byte.
    data_start: usize,
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < 2 || b[0] != b'P' {
        return Err(Error::format(0, "not a netpbm file"));
    }
    let magic = [b[0], b[1]];
    match &magic {
        b"P5" | b"P6" => {}
        b"P2" | b"P3" => {
            return Err(Error::format(
                0,
                format!("ASCII netpbm variant {} is not supported, use binary P5/P6", b[1] as char),
            ))
        }
        _ => return Err(Error::format(0, format!("unsupported netpbm magic {:?}", String::from_utf8_lossy(&magic)))),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match b.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while b.get(pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while b.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, format!("expected header field {} as a decimal number", i + 1)));
        }
        *field = std::str::from_utf8(&b[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start as u64, "header number out of range"))?;
    }
    match b.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos as u64, "expected a single whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(0, format!("maxval {maxval} is not supported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(0, format!("empty image {width}x{height}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos,
    })
}

fn raster<'a>(b: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(0, "image dimensions overflow"))?;
    let have = b.len() - h.data_start;
    if have < need {
        return Err(Error::format(
            h.data_start as u64,
            format!("truncated raster: expected {need} bytes, {have} available"),
        ));
    }
    Ok(&b[h.data_start..h.data_start + need])
}

/// P6 bytes to a `1x3xHxW` tensor in [0, 1].
pub fn decode_ppm(b: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(b)?;
    if &h.magic != b"P6" {
        return Err(Error::format(0, "expected a P6 (binary RGB) image"));
    }
    let px = raster(b, &h, 3)?;
    let plane = h.width * h.height;
    Ok(Tensor::from_fn(vec![1, 3, h.height, h.width], |i| {
        px[(i % plane) * 3 + i / plane] as f32 / 255.0
    }))
}

/// P5 bytes with values 0/255 to a `1x1xHxW` {0, 1} mask.
pub fn decode_pgm_mask(b: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(b)?;
    if &h.magic != b"P5" {
        return Err(Error::format(0, "expected a P5 (binary grey) image"));
    }
    let px = raster(b, &h, 1)?;
    if let Some(i) = px.iter().position(|&v| v != 0 && v != 255) {
        return Err(Error::format(
            (h.data_start + i) as u64,
            format!("mask pixel value {} is neither 0 nor 255", px[i]),
        ));
    }
    Ok(Tensor::from_fn(vec![1, 1, h.height, h.width], |i| (px[i] == 255) as u8 as f32))
}

fn quantize_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `1x3xHxW` tensor in [0, 1] to P6 bytes.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("PPM needs a 1x3xHxW tensor, got {:?}", img.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize_unit(img.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// `1x1xHxW` mask to P5 bytes; values > 0.5 become 255.
pub fn encode_pgm_mask(mask: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = mask.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("PGM needs a 1x1xHxW tensor, got {:?}", mask.shape())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    Ok(out)
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    with_path(path, decode_ppm(&read_file(path)?))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    with_path(path, decode_pgm_mask(&read_file(path)?))
}

pub fn save_ppm(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(img)?)
}

pub fn save_pgm(mask: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm_mask(mask)?)
}
