//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use super::render::{Image, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            for c in 0..CHANNELS {
                out.push((img.get(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Image> {
    let bad = |d: &str| Error::format(origin, d);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse().map_err(|_| bad("bad header number")))
        .collect::<Result<_>>()?;
    if dims != [IMAGE_SIZE, IMAGE_SIZE, 255] {
        return Err(bad(&format!("expected {IMAGE_SIZE}x{IMAGE_SIZE} maxval 255, got {dims:?}")));
    }
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != IMAGE_SIZE * IMAGE_SIZE * CHANNELS {
        return Err(bad("pixel data has the wrong length"));
    }
    let mut data = vec![0.0; body.len()];
    for (i, &b) in body.iter().enumerate() {
        let (pix, c) = (i / CHANNELS, i % CHANNELS);
        data[c * IMAGE_SIZE * IMAGE_SIZE + pix] = b as f64 / 255.0;
    }
    Image::new(data)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
