//! Binary PPM (P6) input and PGM (P5) heatmap output.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    let kind = String::from_utf8_lossy(magic);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(format!("malformed header: missing {kind} magic")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(format!(
                "malformed header: {kind} field {} is not a number",
                ["width", "height", "maxval"][i]
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("malformed header: numeric field overflows"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(
            "malformed header: expected a single whitespace byte before the pixel data",
        ));
    }
    let [width, height, maxval] = fields;
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes a P6 image with maxval 255 into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    if h.maxval != 255 {
        return Err(Error::format(format!(
            "malformed header: maxval {} is not supported (expected 255)",
            h.maxval
        )));
    }
    let plane = h.width * h.height;
    let payload = &bytes[h.data_start..];
    if payload.len() < 3 * plane {
        return Err(Error::format(format!(
            "truncated payload: {}x{} image needs {} bytes, found {}",
            h.width,
            h.height,
            3 * plane,
            payload.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in payload[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

/// Reads a square P6 image of side `side`.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let image = decode_ppm(&fs::read(path)?)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h != side || w != side {
        return Err(Error::dim(format!(
            "{} is {w}x{h}, expected {side}x{side}",
            path.display()
        )));
    }
    Ok(image)
}

/// Encodes a `[3, H, W]` tensor as P6, rounding `v * 255` and clamping.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::dim(format!("expected a 3xHxW image, got {s:?}"))),
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(image.data()[c * plane + i]));
        }
    }
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Min-max normalizes a `rows x cols` map to 8-bit P5. A constant map encodes as zeros.
pub fn encode_pgm_heatmap(values: &[f32], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(Error::dim(format!(
            "{} values cannot fill a {rows}x{cols} heatmap",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Decodes an 8-bit P5 image into raw byte rows.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes, b"P5")?;
    if h.maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {}", h.maxval)));
    }
    let n = h.width * h.height;
    let payload = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::format("truncated payload in PGM"))?;
    Ok((h.height, h.width, payload.to_vec()))
}
