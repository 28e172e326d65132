//! Tensor container format and image writers.
//!
//! Tensors are stored in a small self-describing binary container:
//!
//! ```text
//! magic  b"CFT1"
//! rank   u32 little-endian
//! dims   rank * u32 little-endian
//! data   product(dims) * f32 little-endian, row-major
//! ```
//!
//! Readers reject anything malformed: bad magic, zero or oversized rank,
//! zero dims, truncated or trailing payload bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CFT1";
const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 30;

/// Serializes a tensor into the container format.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a tensor from container bytes, validating the full layout.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let start = *pos;
        let end = start
            .checked_add(n)
            .ok_or_else(|| Error::Corrupt("length overflow".into()))?;
        if end > bytes.len() {
            return Err(Error::Corrupt(format!(
                "truncated container: need {end} bytes, have {}",
                bytes.len()
            )));
        }
        *pos = end;
        Ok(&bytes[start..end])
    };

    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(Error::Corrupt(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Corrupt(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if d == 0 {
            return Err(Error::Corrupt("zero dimension".into()));
        }
        numel = numel
            .checked_mul(d as u64)
            .ok_or_else(|| Error::Corrupt("element count overflow".into()))?;
        shape.push(d as usize);
    }
    if numel > MAX_ELEMS {
        return Err(Error::Corrupt(format!("element count {numel} too large")));
    }
    let payload = take(&mut pos, numel as usize * 4)?;
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Writes bytes to `path` atomically: a sibling temp file is written, synced
/// and renamed over the target, so partially written outputs never appear
/// under their final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("path {path:?} has no file name")))?;
    let mut tmp = dir.join(file_name);
    tmp.set_file_name(format!(
        ".{}.{}.tmp",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Corrupt(format!("reading {}: {e}", path.display())))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn as_image(t: &Tensor) -> Result<(usize, usize, &[f32])> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data())),
        [1, h, w] => Ok((*h, *w, t.data())),
        s => Err(Error::invalid(format!(
            "expected [H,W] or [1,H,W] image, got {s:?}"
        ))),
    }
}

/// Writes a grayscale image as binary PGM. Values are clamped to [0,1] and
/// mapped to round(255 * v).
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, data) = as_image(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(path, &out)
}

/// Writes a signed map as binary PPM with a diverging palette: negative
/// values shade toward blue, positive toward red, zero is white. The map is
/// scaled by its max absolute value; an all-zero map renders all white.
pub fn write_ppm_diverging(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, data) = as_image(t)?;
    let peak = data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in data {
        let s = if peak > 0.0 { (v / peak).clamp(-1.0, 1.0) } else { 0.0 };
        let fade = (255.0 * (1.0 - s.abs())).round() as u8;
        let (r, g, b) = if s >= 0.0 {
            (255, fade, fade)
        } else {
            (fade, fade, 255)
        };
        out.extend_from_slice(&[r, g, b]);
    }
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_rejects_bad_magic() {
        let mut bytes = encode_tensor(&Tensor::ones(&[2, 2]));
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn decode_rejects_truncation_and_trailing_bytes() {
        let bytes = encode_tensor(&Tensor::ones(&[2, 2]));
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode_tensor(&extended).is_err());
    }

    #[test]
    fn decode_rejects_zero_dim_and_huge_rank() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CFT1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        assert!(decode_tensor(&bytes).is_err());

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CFT1");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        assert!(decode_tensor(&bytes).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cft");
        let t = Tensor::from_fn(&[3, 4, 5], |i| i as f32 * 0.25 - 3.0);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let t = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        write_pgm(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P5\n2 1\n25");
        assert_eq!(&bytes[bytes.len() - 2..], &[0u8, 255u8]);
    }
}
