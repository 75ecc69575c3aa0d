//! Clip files.
//!
//! `.raw`: 16-byte header (`LBCL`, then frames, height, width as
//! little-endian `u32`) followed by the values as little-endian `f32`,
//! frame-major then row-major.
//!
//! `.pgm`: one binary 8-bit greyscale image per frame. Pixel values map
//! `v -> round(255 * (v - min) / (max - min))` with `min`/`max` taken over
//! the whole clip and recorded in a `# min=.. max=..` header comment.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::worlds::LatentClip;

pub const MAGIC: &[u8; 4] = b"LBCL";

pub fn encode_raw(clip: &LatentClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * clip.len());
    out.extend_from_slice(MAGIC);
    for n in [clip.frames(), clip.height(), clip.width()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in clip.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<LatentClip> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing LBCL header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (m, h, w) = (word(1), word(2), word(3));
    let n = m
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Format("clip dimensions overflow".into()))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Format(format!(
            "header says {m}x{h}x{w} ({n} values) but payload has {} bytes",
            bytes.len() - 16
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    LatentClip::new(m, h, w, values)
}

/// The clip as it reads back from a `.raw` file.
pub fn quantize(clip: &LatentClip) -> LatentClip {
    clip.with_values(clip.values().iter().map(|v| *v as f32 as f64).collect())
        .expect("same shape")
}

pub fn write_raw(path: &Path, clip: &LatentClip) -> Result<()> {
    fs::write(path, encode_raw(clip))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<LatentClip> {
    decode_raw(&fs::read(path)?)
}

pub fn encode_pgm(clip: &LatentClip, frame: usize) -> Vec<u8> {
    let (lo, hi) = clip
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = hi - lo;
    let mut out = Vec::new();
    write!(out, "P5\n# min={lo:e} max={hi:e}\n{} {}\n255\n", clip.width(), clip.height()).unwrap();
    out.extend(clip.frame(frame).iter().map(|v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `<stem>.raw` plus `<stem>_fNN.pgm` per frame; returns the raw path.
pub fn dump_clip(dir: &Path, stem: &str, clip: &LatentClip) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let raw = dir.join(format!("{stem}.raw"));
    write_raw(&raw, clip)?;
    for f in 0..clip.frames() {
        fs::write(dir.join(format!("{stem}_f{f:02}.pgm")), encode_pgm(clip, f))?;
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stage, StreamKey};

    #[test]
    fn raw_round_trip_is_bit_exact_after_quantization() {
        let clip = LatentClip::new(3, 2, 5, StreamKey::new(4, Stage::Probe).normals(30)).unwrap();
        let bytes = encode_raw(&clip);
        assert_eq!(bytes.len(), 16 + 4 * 30);
        let back = decode_raw(&bytes).unwrap();
        assert_eq!(back, quantize(&clip));
        assert_eq!(encode_raw(&back), bytes);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let clip = LatentClip::zeros(2, 4, 4);
        let bytes = encode_raw(&clip);
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_raw(b"P5\n").is_err());
    }

    #[test]
    fn pgm_layout() {
        let clip = LatentClip::new(1, 1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let pgm = encode_pgm(&clip, 0);
        let text = String::from_utf8_lossy(&pgm);
        assert!(text.starts_with("P5\n# min=-1e0 max=1e0\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }
}
