//! VBF1 frame-feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! bytes 0..4   magic "VBF1"
//! bytes 4..8   u32 frame count T
//! bytes 8..12  u32 embedding dimension D
//! bytes 12..   T*D f32 values, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VBF1";
pub const HEADER_LEN: usize = 12;

/// A T×D matrix of frame embeddings. Always at least one frame, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        let (t, d) = frames.dim();
        if t == 0 || d == 0 {
            return Err(Error::Format(format!("empty feature matrix {t}x{d}")));
        }
        if let Some((idx, v)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value {v} at frame {}, dim {}",
                idx.0, idx.1
            )));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, d) = self.frames.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.frames.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file too short for header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"VBF1\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if t == 0 || d == 0 {
            return Err(Error::Format(format!("invalid shape T={t}, D={d}")));
        }
        let expected = 4 * t as u64 * d as u64;
        let payload = (bytes.len() - HEADER_LEN) as u64;
        if payload != expected {
            let what = if payload < expected {
                "truncated"
            } else {
                "oversized"
            };
            return Err(Error::Format(format!(
                "{what} payload: {payload} bytes, expected {expected} for T={t}, D={d}"
            )));
        }
        let values: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let frames = Array2::from_shape_vec((t, d), values).expect("length checked above");
        FeatureSequence::new(frames)
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes a VBF1 file via a temporary sibling and a rename.
pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("vbf.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&seq.to_bytes())
        .map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_by_one_is_sixteen_bytes() {
        let seq = FeatureSequence::new(Array2::zeros((1, 1))).unwrap();
        assert_eq!(seq.to_bytes().len(), 16);
    }

    #[test]
    fn base_sized_file_length() {
        let seq = FeatureSequence::new(Array2::zeros((49, 768))).unwrap();
        assert_eq!(seq.to_bytes().len(), 12 + 150_528);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Array2::zeros((2, 2));
        m[[1, 0]] = f32::NAN;
        assert!(matches!(FeatureSequence::new(m), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = FeatureSequence::new(Array2::ones((2, 3)))
            .unwrap()
            .to_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        let err = FeatureSequence::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 60));
        let err = FeatureSequence::from_bytes(&bytes).unwrap_err();
        assert!(
            err.to_string()
                .contains("truncated payload: 60 bytes, expected 80"),
            "{err}"
        );
    }

    #[test]
    fn zero_shape_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        assert!(FeatureSequence::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vbf");
        let m = Array2::from_shape_fn((7, 16), |(i, j)| (i as f32 * 0.37 - j as f32 * 1.3).sin());
        let seq = FeatureSequence::new(m).unwrap();
        write_features(&seq, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), seq);
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(t in 1usize..9, d in 1usize..9, seed in any::<u64>()) {
            let mut state = seed | 1;
            let m = Array2::from_shape_fn((t, d), |_| {
                // xorshift over raw bit patterns, skipping non-finite ones
                loop {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    let v = f32::from_bits(state as u32);
                    if v.is_finite() {
                        return v;
                    }
                }
            });
            let seq = FeatureSequence::new(m).unwrap();
            let back = FeatureSequence::from_bytes(&seq.to_bytes()).unwrap();
            let same = seq.frames().iter().zip(back.frames().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
