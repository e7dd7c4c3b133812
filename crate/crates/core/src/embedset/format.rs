// SPDX-License-Identifier: MIT OR Apache-2.0

//! EMB1 binary embedding files.
//!
//! ```text
//! "EMB1" | u32 version=1 | u32 n | u64 m | u8 modality | u8 flags
//! m*n f32 row-major payload | (flags & 1) m u32 class labels
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use ndarray::Array2;

use super::{EmbeddingSet, Modality};
use crate::error::{MsaeError, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1 + 1;
const FLAG_CLASS_LABELS: u8 = 1;

/// Writes `set` as EMB1. Values are stored as f32.
pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (m, n) = (set.rows(), set.dim());
    let labels = set.class_labels();
    let n32 = u32::try_from(n).map_err(|_| MsaeError::Shape(format!("dimension {n} exceeds u32")))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m * n + labels.map_or(0, |l| 4 * l.len()));
    buf.extend_from_slice(EMB1_MAGIC);
    buf.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    buf.extend_from_slice(&n32.to_le_bytes());
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.push(set.modality().code());
    buf.push(if labels.is_some() { FLAG_CLASS_LABELS } else { 0 });
    for &v in set.data().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| MsaeError::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MsaeError::io(path, e))?;
    decode(&bytes, path)
}

fn decode(bytes: &[u8], path: &Path) -> Result<EmbeddingSet> {
    let truncated = |detail: String| MsaeError::Truncated { path: path.to_path_buf(), detail };
    if bytes.len() < 4 || &bytes[..4] != EMB1_MAGIC {
        return Err(MsaeError::BadMagic { path: path.to_path_buf(), expected: "EMB1" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMB1_VERSION {
        return Err(MsaeError::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let m = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let modality = Modality::from_code(bytes[20]).ok_or_else(|| MsaeError::Format {
        path: path.to_path_buf(),
        detail: format!("unknown modality code {}", bytes[20]),
    })?;
    let flags = bytes[21];
    if flags & !FLAG_CLASS_LABELS != 0 {
        return Err(MsaeError::Format { path: path.to_path_buf(), detail: format!("unknown flags {flags:#04x}") });
    }
    if n == 0 || m == 0 {
        return Err(MsaeError::Format { path: path.to_path_buf(), detail: format!("empty matrix {m}x{n}") });
    }
    let m = usize::try_from(m)
        .map_err(|_| MsaeError::Format { path: path.to_path_buf(), detail: "row count overflows".into() })?;
    let has_labels = flags & FLAG_CLASS_LABELS != 0;

    let payload_len = m
        .checked_mul(n)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| MsaeError::Format { path: path.to_path_buf(), detail: "payload size overflows".into() })?;
    let expected = HEADER_LEN + payload_len + if has_labels { 4 * m } else { 0 };
    let body = &bytes[HEADER_LEN..];
    if bytes.len() < expected {
        let rows_present = body.len() / (4 * n);
        return Err(truncated(format!(
            "header declares {m} rows of dimension {n}{}; {} bytes expected, {} present (~{rows_present} rows)",
            if has_labels { " plus labels" } else { "" },
            expected,
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(MsaeError::LengthMismatch {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after declared payload", bytes.len() - expected),
        });
    }

    let mut values = Vec::with_capacity(m * n);
    for (i, chunk) in body[..payload_len].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(MsaeError::NonFinite(format!("{}: entry ({}, {})", path.display(), i / n, i % n)));
        }
        values.push(v as f64);
    }
    let data = Array2::from_shape_vec((m, n), values).expect("length checked");
    let mut set = EmbeddingSet::new(data, modality)?;
    if has_labels {
        let labels = body[payload_len..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set = set.with_class_labels(labels)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> EmbeddingSet {
        EmbeddingSet::new(array![[1.0, -2.5, 3.25], [0.0, 1e-3f32 as f64, -7.0]], Modality::Text)
            .unwrap()
            .with_class_labels(vec![4, 9])
            .unwrap()
    }

    #[test]
    fn round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        let set = sample();
        save_embeddings(&set, &p).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        save_embeddings(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_embeddings(&p), Err(MsaeError::BadMagic { .. })));
    }

    #[test]
    fn header_claims_more_rows_than_present() {
        let data = Array2::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f64);
        let set = EmbeddingSet::new(data, Modality::Image).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        save_embeddings(&set, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // Drop the last row (4 floats).
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_embeddings(&p), Err(MsaeError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        save_embeddings(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_embeddings(&p), Err(MsaeError::LengthMismatch { .. })));
    }

    #[test]
    fn non_finite_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        save_embeddings(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_embeddings(&p), Err(MsaeError::NonFinite(_))));
    }

    #[test]
    fn short_header_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        std::fs::write(&p, b"EMB1\x01\x00").unwrap();
        assert!(matches!(load_embeddings(&p), Err(MsaeError::Truncated { .. })));
        save_embeddings(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 2;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_embeddings(&p), Err(MsaeError::UnsupportedVersion { version: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn f32_payload_round_trips_bit_exactly(
            m in 1usize..6,
            n in 1usize..6,
            raw in proptest::collection::vec(-1e6f32..1e6f32, 36),
            modality in 0u8..3,
        ) {
            let data = Array2::from_shape_fn((m, n), |(i, j)| raw[i * n + j] as f64);
            let set = EmbeddingSet::new(data, Modality::from_code(modality).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.emb");
            save_embeddings(&set, &p).unwrap();
            let first = std::fs::read(&p).unwrap();
            let back = load_embeddings(&p).unwrap();
            prop_assert_eq!(&back, &set);
            save_embeddings(&back, &p).unwrap();
            prop_assert_eq!(first, std::fs::read(&p).unwrap());
        }
    }
}
