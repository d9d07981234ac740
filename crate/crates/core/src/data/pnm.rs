//! Binary portable graymap (P5) and pixmap (P6) codec.

use super::Image;
use crate::error::{Error, Result};

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Ingest("pnm: malformed header".into()))
}

/// Decodes P5/P6 with maxval up to 65535 into `[0, 1]` channel-major data.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Ingest("pnm: not a binary P5/P6 file".into())),
    };
    let mut pos = 2;
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Ingest("pnm: bad dimensions or maxval".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Ingest("pnm: malformed header".into()));
    }
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n * sample_bytes)
        .ok_or_else(|| Error::Ingest("pnm: truncated raster".into()))?;
    let scale = 1.0 / maxval as f64;
    let plane = width * height;
    let mut data = vec![0.0; n];
    for i in 0..n {
        let v = if sample_bytes == 1 {
            raster[i] as f64
        } else {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
        };
        // interleaved → planar
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * plane + pixel] = (v * scale).min(1.0);
    }
    Ok(Image {
        channels,
        height,
        width,
        data,
    })
}

/// Encodes 1- or 3-channel `[0, 1]` data as 8-bit P5/P6.
pub fn encode(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Ingest(format!("pnm: cannot encode {c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    let plane = image.width * image.height;
    for pixel in 0..plane {
        for ch in 0..image.channels {
            let v = image.data[ch * plane + pixel].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}
