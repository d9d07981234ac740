//! `.rawt` raw tensor container.
//!
//! Layout: magic `RAWT`, u8 rank, rank × u32 little-endian dims, then f32
//! little-endian row-major data. Images are rank 2 `[h, w]` or rank 3
//! `[c, h, w]` with values already in `[0, 1]`.

use super::Image;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RAWT";

/// Decodes any-rank container into (shape, values).
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::Ingest("rawt: bad magic".into()));
    }
    let rank = *bytes
        .get(4)
        .ok_or_else(|| Error::Ingest("rawt: truncated header".into()))? as usize;
    let mut pos = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let dim = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Ingest("rawt: truncated header".into()))?;
        shape.push(u32::from_le_bytes(dim.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let payload = bytes
        .get(pos..pos + 4 * n)
        .ok_or_else(|| Error::Ingest("rawt: truncated payload".into()))?;
    if bytes.len() != pos + 4 * n {
        return Err(Error::Ingest("rawt: trailing bytes".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, data))
}

pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize || shape.iter().product::<usize>() != data.len() {
        return Err(Error::Ingest("rawt: shape does not match data".into()));
    }
    let mut out = Vec::with_capacity(5 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Ingest("rawt: dim exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let (shape, data) = decode_tensor(bytes)?;
    let (channels, height, width) = match shape[..] {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::Ingest(format!(
                "rawt: unsupported image shape {shape:?}"
            )))
        }
    };
    if height == 0 || width == 0 {
        return Err(Error::Ingest("rawt: empty image".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Ingest("rawt: non-finite pixel".into()));
    }
    Ok(Image {
        channels,
        height,
        width,
        data: data.into_iter().map(f64::from).collect(),
    })
}

pub fn encode(image: &Image) -> Result<Vec<u8>> {
    let data: Vec<f32> = image.data.iter().map(|&v| v as f32).collect();
    encode_tensor(&[image.channels, image.height, image.width], &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_layout() {
        let bytes = encode_tensor(&[1, 2], &[0.5, 1.0]).unwrap();
        let mut want = b"RAWT\x02".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(0.5f32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_tensor(&bytes).unwrap(), (vec![1, 2], vec![0.5, 1.0]));
    }

    #[test]
    fn image_shapes() {
        let gray = decode(&encode_tensor(&[2, 3], &[0.0; 6]).unwrap()).unwrap();
        assert_eq!((gray.channels, gray.height, gray.width), (1, 2, 3));
        let rgb = decode(&encode_tensor(&[3, 1, 1], &[0.1, 0.2, 0.3]).unwrap()).unwrap();
        assert_eq!(rgb.channels, 3);
        assert!(decode(&encode_tensor(&[2, 1, 1], &[0.0; 2]).unwrap()).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_tensor(&[4], &[1.0; 4]).unwrap();
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensor(&bytes[..6]).is_err());
    }
}
