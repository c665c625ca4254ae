//! Binary (P6) PPM reading and writing for 8-bit RGB images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageaug::Image;

/// Encodes a 3-channel image, quantizing each pixel to `round(v * 255)`.
pub fn encode(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("missing P6 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("bad header number: {e}"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing whitespace after maxval".into());
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos + 1,
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let hdr = parse_header(bytes)?;
    if hdr.width == 0 || hdr.height == 0 {
        return Err(format!("empty {}x{} image", hdr.width, hdr.height));
    }
    if hdr.maxval == 0 || hdr.maxval > 255 {
        return Err(format!("only 8-bit samples are supported, maxval {}", hdr.maxval));
    }
    let n = hdr.width * hdr.height;
    let raster = &bytes[hdr.data_start..];
    if raster.len() < 3 * n {
        return Err(format!("raster holds {} bytes, need {}", raster.len(), 3 * n));
    }
    let scale = hdr.maxval as f64;
    let mut pixels = vec![0.0; 3 * n];
    for (i, px) in raster[..3 * n].chunks(3).enumerate() {
        for c in 0..3 {
            pixels[c * n + i] = (px[c] as f64 / scale).min(1.0);
        }
    }
    Image::new(3, hdr.height, hdr.width, pixels).map_err(|e| e.to_string())
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes).map_err(|reason| Error::Load {
        path: path.to_path_buf(),
        reason,
    })
}
